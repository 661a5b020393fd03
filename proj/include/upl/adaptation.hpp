// SPDX-License-Identifier: Apache-2.0
//
// Training procedures: supervised source pre-training, the two-pass
// pseudo-label adaptation loop, inference, and the comparison baselines.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "upl/labels.hpp"
#include "upl/losses.hpp"
#include "upl/metrics.hpp"
#include "upl/model.hpp"
#include "upl/optim.hpp"
#include "upl/pseudolabel.hpp"
#include "upl/rng.hpp"
#include "upl/synthdata.hpp"
#include "upl/transforms.hpp"

namespace upl {

class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

enum class Method { upl, tent, ptbn, selftrain, source_only, finetune, target_only };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::upl: return "upl";
        case Method::tent: return "tent";
        case Method::ptbn: return "ptbn";
        case Method::selftrain: return "selftrain";
        case Method::source_only: return "source_only";
        case Method::finetune: return "finetune";
        case Method::target_only: return "target_only";
    }
    return "?";
}

struct Ablation {
    bool use_M = true;
    bool use_TDG_dropout = true;
    bool use_T = true;
    bool use_TFS = true;
    bool use_Lment = true;

    bool all_on() const { return use_M && use_TDG_dropout && use_T && use_TFS && use_Lment; }
};

struct AdaptConfig {
    ArchConfig arch;
    int K = 4;
    float tau = 0.95f;
    float lambda = 1.0f;
    float lr_adapt = 1e-4f;
    int adapt_epochs = 20;
    int pretrain_epochs = 400;
    float lr_pretrain = 0.01f;
    float lr_decay = 0.9f;
    int lr_decay_every = 4;
    int batch_size = 0;  // 0: one case (all its slices) per batch
    bool cleanup = true;
    std::uint64_t seed = 42;
    Ablation ablation;
    Method method = Method::upl;

    float dropout_rate() const { return arch.dropout_rate; }

    void validate(int classes) const {
        arch.validate();
        check_tau(tau, classes);
        if (K < 1 || K > kMaxHeads) throw std::invalid_argument("K must be in [1," + std::to_string(kMaxHeads) + "]");
        if (!(lambda >= 0.0f)) throw std::invalid_argument("lambda must be non-negative");
        if (!(lr_adapt > 0.0f) || !(lr_pretrain > 0.0f)) throw std::invalid_argument("learning rates must be positive");
        if (!(lr_decay > 0.0f) || lr_decay_every < 1) throw std::invalid_argument("invalid learning-rate decay");
        if (adapt_epochs < 0 || pretrain_epochs < 0) throw std::invalid_argument("epoch counts must be non-negative");
        if (batch_size == 1 || batch_size < 0) throw std::invalid_argument("batch_size must be 0 (per case) or >= 2");
    }

    /// Step-decayed pre-training learning rate for a 0-based epoch.
    float pretrain_lr(int epoch) const {
        return static_cast<float>(lr_pretrain * std::pow(static_cast<double>(lr_decay), epoch / lr_decay_every));
    }
};

struct EpochRecord {
    int epoch = 0;
    float lr = 0.0f;
    double loss = 0.0;      // total objective, mean over batches
    double loss_sup = 0.0;  // Dice / TFS part
    double loss_ent = 0.0;  // entropy part
    double reliability = 0.0;  // mean reliable fraction of the pseudo labels
    std::vector<double> val_dice;  // per foreground class
    double val_score = 0.0;        // mean foreground Dice
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;  // -1: no epoch ran, the initial weights are returned
    double best_score = 0.0;
};

struct TrainHooks {
    std::function<void(const EpochRecord&)> on_epoch;
    /// May replace an epoch's validation score before checkpoint selection.
    std::function<double(int epoch, double score)> score_override;
    /// Sees every pseudo-label bundle with its epoch and batch index.
    std::function<void(int epoch, int batch, const PseudoLabelBundle&)> on_bundle;
};

struct TrainResult {
    SegModel model;
    AdamState optimizer;
    TrainLog log;
};

// ---------------------------------------------------------------------------
// Batching

struct Batch {
    int begin, end;
};

/// Batches in a fresh shuffled order. Whole cases by default; fixed-size
/// batches merge a trailing single image into the previous batch.
inline std::vector<Batch> make_batches(const SliceSet& s, int batch_size, SeededRng* order_rng) {
    std::vector<Batch> out;
    if (batch_size == 0) {
        for (const auto& c : s.cases()) out.push_back({c.begin, c.end});
    } else {
        for (int b = 0; b < s.size(); b += batch_size) out.push_back({b, std::min(b + batch_size, s.size())});
        if (out.size() > 1 && out.back().end - out.back().begin < 2) {
            out[out.size() - 2].end = out.back().end;
            out.pop_back();
        }
    }
    if (order_rng) shuffle(out, *order_rng);
    return out;
}

namespace detail {

inline void check_finite(const LossValue& l, const std::string& where) {
    const float v = l.item();
    if (!std::isfinite(v)) throw NumericError("non-finite " + l.name + " loss (" + std::to_string(v) + ") " + where);
}

inline std::string where(int epoch, int batch) {
    return "at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch);
}

/// Keeps the weights with the strictly highest score; ties keep the earlier.
class BestTracker {
   public:
    BestTracker(const SegModel& initial, const AdamState& opt)
        : model_(initial.clone()), opt_(opt), score_(-std::numeric_limits<double>::infinity()) {}

    bool offer(int epoch, double score, const SegModel& m, const AdamState& opt) {
        if (!(score > score_)) return false;
        model_ = m.clone();
        opt_ = opt;
        score_ = score;
        epoch_ = epoch;
        return true;
    }

    TrainResult finish(TrainLog log) {
        log.best_epoch = epoch_;
        log.best_score = score_;
        return {std::move(model_), std::move(opt_), std::move(log)};
    }

   private:
    SegModel model_;
    AdamState opt_;
    double score_;
    int epoch_ = -1;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Inference

struct InferResult {
    LabelVolume labels;
    Tensor mean;  // [B,C,H,W]
    double reliability_fraction = 0.0;
};

/// Head 0, identity transform, eval mode; argmax plus optional cleanup.
inline LabelVolume infer_single(SegModel& model, const Tensor& x, bool cleanup) {
    const Tensor p = model.forward_head(x, 0, Mode::eval, nullptr, nullptr, false);
    LabelVolume l = argmax_channels(p);
    if (cleanup) keep_largest_components(l, model.classes());
    return l;
}

/// Every head sees the input under one transform drawn from `rng` (identity
/// when `transforms` is false); outputs are mapped back and averaged.
inline InferResult infer_ensemble(SegModel& model, const Tensor& x, SeededRng& rng, bool cleanup, float tau,
                                  bool transforms = true) {
    std::vector<Tensor> probs;
    for (int k = 0; k < model.head_count(); ++k) {
        const SpatialTransform t = transforms ? sample_transform(rng) : SpatialTransform::identity();
        const Tensor p = model.forward_head(apply(t, x), k, Mode::eval, nullptr, nullptr, false);
        probs.push_back(apply(inverse(t), p));
    }
    const ProbEnsemble e = ensemble(probs);
    InferResult r;
    r.mean = e.mean;
    r.labels = argmax_channels(e.mean);
    if (cleanup) keep_largest_components(r.labels, model.classes());
    const Tensor m = reliability_map(e.mean, tau);
    double s = 0.0;
    for (float v : m.data()) s += v;
    r.reliability_fraction = m.numel() ? s / static_cast<double>(m.numel()) : 0.0;
    return r;
}

enum class InferMode { single, ensemble };

struct EvalOptions {
    InferMode mode = InferMode::single;
    bool cleanup = true;
    float tau = 0.95f;
    std::uint64_t seed = 0;  // transform stream of ensemble inference
    bool with_assd = true;
    std::string method = "model";
};

/// Per-case results over a labeled set, in case order.
inline std::vector<CaseResult> evaluate(SegModel& model, const SliceSet& data, const EvalOptions& opt) {
    if (!data.labeled()) throw std::invalid_argument("evaluate: dataset has no labels");
    if (data.classes != model.classes()) {
        throw std::invalid_argument("class count mismatch: model has " + std::to_string(model.classes()) +
                                    ", data has " + std::to_string(data.classes));
    }
    SeededRng rng(opt.seed);
    std::vector<CaseResult> out;
    for (const auto& c : data.cases()) {
        const Tensor x = data.images(c.begin, c.end);
        const LabelVolume pred = opt.mode == InferMode::single ? infer_single(model, x, opt.cleanup)
                                                               : infer_ensemble(model, x, rng, opt.cleanup, opt.tau).labels;
        const LabelVolume gt = data.label_volume(c.begin, c.end);
        if (opt.with_assd) {
            out.push_back(evaluate_case(opt.method, static_cast<int>(c.case_id), pred, gt, data.classes));
        } else {
            CaseResult r{opt.method, static_cast<int>(c.case_id), {}, {}};
            for (int k = 1; k < data.classes; ++k) r.dice.push_back(dice(pred, gt, k));
            out.push_back(std::move(r));
        }
    }
    return out;
}

namespace detail {

/// Validation score and per-class Dice.
inline std::pair<double, std::vector<double>> validate(SegModel& model, const SliceSet& val, InferMode mode,
                                                       const AdaptConfig& cfg, std::uint64_t infer_seed) {
    EvalOptions opt;
    opt.mode = mode;
    opt.cleanup = cfg.cleanup;
    opt.tau = cfg.tau;
    opt.seed = infer_seed;
    opt.with_assd = false;
    const auto res = evaluate(model, val, opt);
    std::vector<double> per(static_cast<std::size_t>(val.classes - 1), 0.0);
    for (const auto& r : res) {
        for (std::size_t k = 0; k < r.dice.size(); ++k) per[k] += r.dice[k] / static_cast<double>(res.size());
    }
    return {mean_foreground_dice(res), per};
}

inline void finish_epoch(EpochRecord& rec, TrainLog& log, BestTracker& best, SegModel& model, const AdamState& opt,
                         const SliceSet& val, InferMode mode, const AdaptConfig& cfg, std::uint64_t infer_seed,
                         const TrainHooks& hooks) {
    auto [score, per] = validate(model, val, mode, cfg, infer_seed);
    if (hooks.score_override) score = hooks.score_override(rec.epoch, score);
    rec.val_score = score;
    rec.val_dice = std::move(per);
    best.offer(rec.epoch, score, model, opt);
    log.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(log.epochs.back());
}

/// Supervised Dice training with the step-decayed schedule; selects the best
/// single-head validation checkpoint.
inline TrainResult supervised_train(SegModel model, const SliceSet& train, const SliceSet& val, const AdaptConfig& cfg,
                                    int epochs, const SeedStreams& streams, const TrainHooks& hooks) {
    if (train.size() == 0 || !train.labeled()) throw std::invalid_argument("supervised training needs labeled images");
    if (val.size() == 0 || !val.labeled()) throw std::invalid_argument("checkpoint selection needs a labeled val set");
    if (model.head_count() != 1) throw std::invalid_argument("supervised training expects a single-head model");
    SeededRng order = streams.stream("data");
    const std::uint64_t infer_seed = streams.seed_for("infer");
    Adam adam(cfg.lr_pretrain);
    auto params = model.parameters();
    TrainLog log;
    BestTracker best(model, adam.state());
    for (int epoch = 0; epoch < epochs; ++epoch) {
        adam.set_lr(cfg.pretrain_lr(epoch));
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = adam.lr();
        const auto batches = make_batches(train, cfg.batch_size, &order);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const Tensor x = train.images(batches[b].begin, batches[b].end);
            const Tensor y = one_hot(train.label_volume(batches[b].begin, batches[b].end), train.classes);
            Tape tape;
            const Tensor p = model.forward_head(x, 0, Mode::train, nullptr, &tape, false);
            const LossValue loss = dice_loss_supervised(p, y);
            check_finite(loss, where(epoch, static_cast<int>(b)));
            zero_grads(params);
            tape.backward(loss.value);
            adam.step(params);
            rec.loss += loss.item() / static_cast<double>(batches.size());
            rec.loss_sup = rec.loss;
        }
        finish_epoch(rec, log, best, model, adam.state(), val, InferMode::single, cfg, infer_seed, hooks);
    }
    return best.finish(std::move(log));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Source pre-training

/// Fresh single-head model trained on labeled source images.
inline TrainResult pretrain(const SliceSet& source_train, const SliceSet& source_val, const AdaptConfig& cfg,
                            const TrainHooks& hooks = {}) {
    if (source_train.size() == 0 || source_val.size() == 0) throw std::invalid_argument("pretrain: empty dataset");
    cfg.validate(source_train.classes);
    const SeedStreams streams(cfg.seed);
    SeededRng init = streams.stream("init");
    SegModel model = SegModel::create(cfg.arch, source_train.classes, init);
    return detail::supervised_train(std::move(model), source_train, source_val, cfg, cfg.pretrain_epochs, streams,
                                    hooks);
}

// ---------------------------------------------------------------------------
// Pseudo-label adaptation

namespace detail {

/// One perturbed forward pass of every head, mapped back to the input frame.
inline std::vector<Tensor> perturbed_heads(SegModel& model, const Tensor& x, const Ablation& ab, SeededRng& trng,
                                           SeededRng& drng, Tape* tape) {
    std::vector<Tensor> out;
    for (int k = 0; k < model.head_count(); ++k) {
        const SpatialTransform t = ab.use_T ? sample_transform(trng) : SpatialTransform::identity();
        const Tensor p = model.forward_head(apply(t, x), k, Mode::train, &drng, tape, ab.use_TDG_dropout);
        out.push_back(apply(inverse(t), p));
    }
    return out;
}

inline void drop_reliability(PseudoLabelBundle& b) {
    for (auto& v : b.reliability.mutable_data()) v = 1.0f;
}

}  // namespace detail

/// Grows K heads and adapts on unlabeled target images. Each update step runs
/// an untaped first pass that produces the pseudo-label bundle and a taped
/// second pass, under fresh transforms and dropout masks, that is supervised
/// by it. Ablation toggles:
///   use_TFS=false  : no first pass; with use_Lment=false the heads are
///                    supervised by a pseudo label from their own (detached)
///                    predictions, otherwise by nothing
///   use_Lment=false: per-head entropy instead of the mean-prediction entropy
///   use_M=false    : reliability map of ones
///   use_T=false    : identity transforms
///   use_TDG_dropout=false: dropout gates inactive in both passes
inline TrainResult adapt_upl(const SegModel& pretrained, const SliceSet& target_train, const SliceSet& target_val,
                             const AdaptConfig& cfg, const TrainHooks& hooks = {}) {
    if (target_train.size() == 0) throw std::invalid_argument("adapt: unlabeled target set is empty");
    if (target_val.size() == 0 || !target_val.labeled()) {
        throw std::invalid_argument("adapt: a labeled target val set is required for checkpoint selection");
    }
    cfg.validate(pretrained.classes());
    const Ablation& ab = cfg.ablation;
    const SeedStreams streams(cfg.seed);
    SeededRng order = streams.stream("data");
    SeededRng drng = streams.stream("dropout");
    SeededRng trng = streams.stream("transforms");
    const std::uint64_t infer_seed = streams.seed_for("infer");

    SegModel model = grow(pretrained, cfg.K);
    model.set_dropout_gates(ab.use_TDG_dropout);
    Adam adam(cfg.lr_adapt);
    auto params = model.parameters();
    TrainLog log;
    detail::BestTracker best(model, adam.state());
    std::uint64_t step = 0;
    for (int epoch = 0; epoch < cfg.adapt_epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = cfg.lr_adapt;
        const auto batches = make_batches(target_train, cfg.batch_size, &order);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            ++step;
            const Tensor x = target_train.images(batches[b].begin, batches[b].end);
            std::optional<PseudoLabelBundle> bundle;
            if (ab.use_TFS) {
                const auto first = detail::perturbed_heads(model, x, ab, trng, drng, nullptr);
                bundle = make_pseudo_label(ensemble(first), cfg.tau, cfg.cleanup, step);
                if (!ab.use_M) detail::drop_reliability(*bundle);
            }

            Tape tape;
            const auto heads = detail::perturbed_heads(model, x, ab, trng, drng, &tape);
            if (!ab.use_TFS && !ab.use_Lment) {
                bundle = make_pseudo_label(ensemble(heads), cfg.tau, cfg.cleanup, step);
                if (!ab.use_M) detail::drop_reliability(*bundle);
            }
            const std::string at = detail::where(epoch, static_cast<int>(b));
            const LossValue ent = ab.use_Lment ? mean_entropy(heads) : per_head_entropy(heads);
            detail::check_finite(ent, at);
            LossValue total{scale(ent.value, cfg.lambda), "total"};
            if (bundle) {
                if (bundle->step != step) throw std::logic_error("pseudo-label bundle is from another update step");
                const LossValue sup = tfs_loss(heads, *bundle, model.head_count());
                detail::check_finite(sup, at);
                total = total_loss(sup, ent, cfg.lambda);
                rec.loss_sup += sup.item() / static_cast<double>(batches.size());
                rec.reliability += reliability_fraction(*bundle) / static_cast<double>(batches.size());
                if (hooks.on_bundle) hooks.on_bundle(epoch, static_cast<int>(b), *bundle);
            }
            detail::check_finite(total, at);
            rec.loss_ent += ent.item() / static_cast<double>(batches.size());
            rec.loss += total.item() / static_cast<double>(batches.size());
            zero_grads(params);
            tape.backward(total.value);
            adam.step(params);
        }
        detail::finish_epoch(rec, log, best, model, adam.state(), target_val, InferMode::ensemble, cfg, infer_seed,
                             hooks);
    }
    return best.finish(std::move(log));
}

// ---------------------------------------------------------------------------
// Baselines

/// Self-training with its own pseudo labels: single head, no transforms, no
/// dropout, argmax labels from the same forward pass, unweighted Dice plus
/// lambda times the prediction entropy.
inline TrainResult baseline_selftrain(const SegModel& pretrained, const SliceSet& target_train,
                                      const SliceSet& target_val, const AdaptConfig& cfg, const TrainHooks& hooks = {}) {
    if (target_train.size() == 0) throw std::invalid_argument("selftrain: unlabeled target set is empty");
    if (target_val.size() == 0 || !target_val.labeled()) throw std::invalid_argument("selftrain: val set required");
    if (pretrained.head_count() != 1) throw std::invalid_argument("selftrain: expects the single-head source model");
    cfg.validate(pretrained.classes());
    const SeedStreams streams(cfg.seed);
    SeededRng order = streams.stream("data");
    const std::uint64_t infer_seed = streams.seed_for("infer");
    SegModel model = pretrained.clone();
    Adam adam(cfg.lr_adapt);
    auto params = model.parameters();
    TrainLog log;
    detail::BestTracker best(model, adam.state());
    for (int epoch = 0; epoch < cfg.adapt_epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = cfg.lr_adapt;
        const auto batches = make_batches(target_train, cfg.batch_size, &order);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const Tensor x = target_train.images(batches[b].begin, batches[b].end);
            Tape tape;
            const Tensor p = model.forward_head(x, 0, Mode::train, nullptr, &tape, false);
            LabelVolume pl = argmax_channels(p);
            if (cfg.cleanup) keep_largest_components(pl, model.classes());
            const LossValue sup = dice_loss_supervised(p, one_hot(pl, model.classes()));
            const LossValue ent = mean_entropy({p});
            const LossValue total = total_loss(sup, ent, cfg.lambda);
            detail::check_finite(total, detail::where(epoch, static_cast<int>(b)));
            rec.loss += total.item() / static_cast<double>(batches.size());
            rec.loss_sup += sup.item() / static_cast<double>(batches.size());
            rec.loss_ent += ent.item() / static_cast<double>(batches.size());
            rec.reliability += 1.0 / static_cast<double>(batches.size());
            zero_grads(params);
            tape.backward(total.value);
            adam.step(params);
        }
        detail::finish_epoch(rec, log, best, model, adam.state(), target_val, InferMode::single, cfg, infer_seed,
                             hooks);
    }
    return best.finish(std::move(log));
}

/// One train-mode pass over the target images in case order, refreshing the
/// batch-norm running statistics. No gradients are taken.
inline SegModel baseline_ptbn(const SegModel& pretrained, const SliceSet& target_train, const AdaptConfig& cfg) {
    SegModel model = pretrained.clone();
    for (const auto& b : make_batches(target_train, cfg.batch_size, nullptr)) {
        for (int k = 0; k < model.head_count(); ++k) {
            (void)model.forward_head(target_train.images(b.begin, b.end), k, Mode::train, nullptr, nullptr, false);
        }
    }
    return model;
}

/// Entropy minimization over the batch-norm affine parameters only.
inline TrainResult baseline_tent(const SegModel& pretrained, const SliceSet& target_train, const SliceSet& target_val,
                                 const AdaptConfig& cfg, const TrainHooks& hooks = {}) {
    if (target_train.size() == 0) throw std::invalid_argument("tent: unlabeled target set is empty");
    if (target_val.size() == 0 || !target_val.labeled()) throw std::invalid_argument("tent: val set required");
    if (pretrained.head_count() != 1) throw std::invalid_argument("tent: expects the single-head source model");
    const SeedStreams streams(cfg.seed);
    SeededRng order = streams.stream("data");
    const std::uint64_t infer_seed = streams.seed_for("infer");
    SegModel model = pretrained.clone();
    if (!(cfg.lr_adapt >= 0.0f)) throw std::invalid_argument("tent: negative learning rate");
    Adam adam(cfg.lr_adapt);
    auto all = model.parameters();
    auto bn = model.parameters(ParamGroup::bn_affine_only);
    TrainLog log;
    detail::BestTracker best(model, adam.state());
    for (int epoch = 0; epoch < cfg.adapt_epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = cfg.lr_adapt;
        const auto batches = make_batches(target_train, cfg.batch_size, &order);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const Tensor x = target_train.images(batches[b].begin, batches[b].end);
            Tape tape;
            const Tensor p = model.forward_head(x, 0, Mode::train, nullptr, &tape, false);
            const LossValue ent = per_head_entropy({p});
            detail::check_finite(ent, detail::where(epoch, static_cast<int>(b)));
            rec.loss += ent.item() / static_cast<double>(batches.size());
            rec.loss_ent = rec.loss;
            zero_grads(all);
            tape.backward(ent.value);
            adam.step(bn);
        }
        detail::finish_epoch(rec, log, best, model, adam.state(), target_val, InferMode::single, cfg, infer_seed,
                             hooks);
    }
    return best.finish(std::move(log));
}

/// Supervised fine-tuning of the source model on labeled target images,
/// `adapt_epochs` epochs on the pre-training schedule.
inline TrainResult baseline_finetune(const SegModel& pretrained, const SliceSet& labeled_target,
                                     const SliceSet& target_val, const AdaptConfig& cfg, const TrainHooks& hooks = {}) {
    if (labeled_target.size() == 0) throw std::invalid_argument("finetune: labeled target set is empty");
    cfg.validate(pretrained.classes());
    const SeedStreams streams(cfg.seed);
    return detail::supervised_train(pretrained.clone(), labeled_target, target_val, cfg, cfg.adapt_epochs, streams,
                                    hooks);
}

/// Supervised training from random initialization on labeled target images.
inline TrainResult baseline_target_only(const SliceSet& labeled_target, const SliceSet& target_val,
                                        const AdaptConfig& cfg, const TrainHooks& hooks = {}) {
    if (labeled_target.size() == 0) throw std::invalid_argument("target_only: labeled target set is empty");
    return pretrain(labeled_target, target_val, cfg, hooks);
}

}  // namespace upl
