#include <gtest/gtest.h>

#include "oracle.hpp"
#include "test_util.hpp"
#include "upl/adaptation.hpp"

using namespace upl;
using upl::test::bitwise_equal;
namespace o = upl::oracle;
using o::DT;

namespace {

// First `n` cases of a set.
SliceSet first_cases(const SliceSet& s, int n) {
    const auto cases = s.cases();
    const int end = cases[static_cast<std::size_t>(n - 1)].end;
    SliceSet out = s;
    out.case_ids.assign(s.case_ids.begin(), s.case_ids.begin() + end);
    out.pixels.assign(s.pixels.begin(), s.pixels.begin() + static_cast<std::ptrdiff_t>(end * s.plane()));
    if (s.labeled()) out.labels.assign(s.labels.begin(), s.labels.begin() + static_cast<std::ptrdiff_t>(end * s.plane()));
    return out;
}

struct Fixture {
    BenchmarkData data = generate_benchmark(find_benchmark("SYN-A2B"), 11, 10);
    SliceSet src_train = first_cases(data.source.train, 2);
    SliceSet src_val = first_cases(data.source.val, 1);
    SliceSet tgt_train = first_cases(data.target.train, 2).without_labels();
    SliceSet tgt_val = first_cases(data.target.val, 1);

    AdaptConfig cfg() const {
        AdaptConfig c;
        c.arch.base_channels = 4;
        c.pretrain_epochs = 2;
        c.adapt_epochs = 1;
        c.K = 2;
        c.lr_adapt = 1e-3f;
        c.seed = 5;
        return c;
    }
};

const Fixture& fx() {
    static const Fixture f;
    return f;
}

const SegModel& pretrained() {
    static const SegModel m = pretrain(fx().src_train, fx().src_val, fx().cfg()).model;
    return m;
}

void expect_same_params(const SegModel& a, const SegModel& b) {
    const auto pa = a.parameters(), pb = b.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].name, pb[i].name);
        EXPECT_TRUE(bitwise_equal(pa[i].tensor.data(), pb[i].tensor.data())) << pa[i].name;
    }
}

bool same_params(const SegModel& a, const SegModel& b) {
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (!bitwise_equal(pa[i].tensor.data(), pb[i].tensor.data())) return false;
    return true;
}

double train_mode_loss(SegModel m, const SliceSet& s) {
    const Tensor p = m.forward_head(s.images(0, s.size()), 0, Mode::train, nullptr, nullptr, false);
    return dice_loss_supervised(p, one_hot(s.label_volume(0, s.size()), s.classes)).item();
}

// Eval-mode forward of head 0 written against the double-precision oracles.
DT oracle_forward(SegModel& m, const Tensor& x) {
    auto block = [](const ConvBnAct& c, const DT& in) {
        const DT w = DT::of(c.weight);
        const DT zero(Shape{c.weight.dim(0)});
        const DT y = o::conv(in, w, zero, (c.weight.dim(2) - 1) / 2);
        return o::leaky(o::batchnorm(y, DT::of(c.bn.gamma), DT::of(c.bn.beta), c.bn.eps,
                                     {c.bn.running_mean.begin(), c.bn.running_mean.end()},
                                     {c.bn.running_var.begin(), c.bn.running_var.end()}),
                        static_cast<double>(kLeakySlope));
    };
    std::vector<DT> skips;
    DT h = DT::of(x);
    const auto& enc = m.encoder().levels;
    for (std::size_t l = 0; l < enc.size(); ++l) {
        if (l > 0) h = o::maxpool(h);
        h = block(enc[l][1], block(enc[l][0], h));
        skips.push_back(h);
    }
    const HeadParams& hp = m.head(0);
    DT d = skips.back();
    for (int l = static_cast<int>(hp.up.size()) - 1; l >= 0; --l) {
        const auto li = static_cast<std::size_t>(l);
        const DT u = block(hp.up[li], o::upsample(d));
        d = block(hp.blocks[li][1], block(hp.blocks[li][0], o::concat(u, skips[li])));
    }
    return o::softmax(o::conv(d, DT::of(hp.out_weight), DT::of(hp.out_bias), 0));
}

}  // namespace

TEST(Config, PretrainSchedule) {
    AdaptConfig c;
    for (int e = 0; e < 4; ++e) EXPECT_FLOAT_EQ(c.pretrain_lr(e), 0.01f);
    for (int e = 4; e < 8; ++e) EXPECT_FLOAT_EQ(c.pretrain_lr(e), 0.009f);
    EXPECT_FLOAT_EQ(c.pretrain_lr(8), 0.0081f);
    EXPECT_NO_THROW(c.validate(3));
    c.tau = 0.3f;
    EXPECT_THROW(c.validate(3), std::invalid_argument);
    c = AdaptConfig{};
    c.K = 0;
    EXPECT_THROW(c.validate(3), std::invalid_argument);
    c = AdaptConfig{};
    c.batch_size = 1;
    EXPECT_THROW(c.validate(3), std::invalid_argument);
}

TEST(Batches, CasesOrFixedSize) {
    const SliceSet& s = fx().src_train;
    const auto by_case = make_batches(s, 0, nullptr);
    ASSERT_EQ(by_case.size(), 2u);
    EXPECT_EQ(by_case[0].begin, 0);
    EXPECT_EQ(by_case[1].end, s.size());
    const auto fixed = make_batches(s, 3, nullptr);
    int covered = 0;
    for (const auto& b : fixed) {
        EXPECT_GE(b.end - b.begin, 2);
        covered += b.end - b.begin;
    }
    EXPECT_EQ(covered, s.size());
    SeededRng a(1), b(1);
    const auto sa = make_batches(s, 2, &a), sb = make_batches(s, 2, &b);
    for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_EQ(sa[i].begin, sb[i].begin);
}

TEST(Pretrain, OneEpochReducesLoss) {
    AdaptConfig c = fx().cfg();
    c.pretrain_epochs = 1;
    c.batch_size = 2;
    const SliceSet four = [&] {
        SliceSet s = first_cases(fx().src_train, 1);
        s.case_ids.resize(4);
        s.pixels.resize(4 * s.plane());
        s.labels.resize(4 * s.plane());
        return s;
    }();
    SeededRng init = SeedStreams(c.seed).stream("init");
    const SegModel fresh = SegModel::create(c.arch, 3, init);
    const auto r = pretrain(four, fx().src_val, c);
    EXPECT_LT(train_mode_loss(r.model.clone(), four), train_mode_loss(fresh.clone(), four));
    ASSERT_EQ(r.log.epochs.size(), 1u);
    EXPECT_EQ(r.log.best_epoch, 0);
    EXPECT_FLOAT_EQ(r.log.epochs[0].lr, 0.01f);
}

TEST(Pretrain, LogsDecayedLearningRate) {
    AdaptConfig c = fx().cfg();
    c.pretrain_epochs = 5;
    c.lr_decay_every = 4;
    const SliceSet one = first_cases(fx().src_train, 1);
    const auto r = pretrain(one, fx().src_val, c);
    ASSERT_EQ(r.log.epochs.size(), 5u);
    EXPECT_FLOAT_EQ(r.log.epochs[3].lr, 0.01f);
    EXPECT_FLOAT_EQ(r.log.epochs[4].lr, 0.009f);
    for (const auto& e : r.log.epochs) {
        EXPECT_GE(e.val_score, 0.0);
        EXPECT_LE(e.val_score, 1.0);
    }
}

TEST(Pretrain, ReturnsTheSelectedEpoch) {
    AdaptConfig c = fx().cfg();
    const SliceSet one = first_cases(fx().src_train, 1);
    // Weights after epoch 1: a two-epoch run whose score only increases.
    c.pretrain_epochs = 2;
    TrainHooks rising;
    rising.score_override = [](int e, double) { return static_cast<double>(e); };
    const auto two = pretrain(one, fx().src_val, c, rising);
    EXPECT_EQ(two.log.best_epoch, 1);
    // Four epochs with a perfect score injected at epoch 1.
    c.pretrain_epochs = 4;
    TrainHooks inject;
    inject.score_override = [](int e, double) { return e == 1 ? 1.0 : 0.0; };
    const auto four = pretrain(one, fx().src_val, c, inject);
    EXPECT_EQ(four.log.best_epoch, 1);
    EXPECT_EQ(four.log.best_score, 1.0);
    ASSERT_EQ(four.log.epochs.size(), 4u);
    expect_same_params(four.model, two.model);
    // Ties keep the earlier epoch.
    TrainHooks flat;
    flat.score_override = [](int, double) { return 0.5; };
    EXPECT_EQ(pretrain(one, fx().src_val, c, flat).log.best_epoch, 0);
}

TEST(Pretrain, ZeroEpochsAndErrors) {
    AdaptConfig c = fx().cfg();
    c.pretrain_epochs = 0;
    const auto r = pretrain(fx().src_train, fx().src_val, c);
    EXPECT_EQ(r.log.best_epoch, -1);
    EXPECT_TRUE(r.log.epochs.empty());
    EXPECT_THROW(pretrain(SliceSet{}, fx().src_val, c), std::invalid_argument);
    EXPECT_THROW(pretrain(fx().src_train, SliceSet{}, c), std::invalid_argument);
}

TEST(Inference, SingleHeadMatchesOracleForward) {
    SegModel m = pretrained().clone();
    const Tensor x = fx().tgt_val.images(0, 3);
    const Tensor p = m.forward_head(x, 0, Mode::eval, nullptr, nullptr, false);
    const DT want = oracle_forward(m, x);
    double worst = 0;
    for (std::size_t i = 0; i < p.numel(); ++i) worst = std::max(worst, std::fabs(p[i] - want[i]));
    EXPECT_LT(worst, 1e-5);
    const LabelVolume got = infer_single(m, x, false);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const std::size_t b = i / 4096, n = i % 4096;
        int best = 0;
        for (int c = 1; c < 3; ++c)
            if (want[(b * 3 + c) * 4096 + n] > want[(b * 3 + best) * 4096 + n]) best = c;
        agree += got.labels[i] == best;
    }
    // Near-ties may flip between float and double; they are rare.
    EXPECT_GE(static_cast<double>(agree) / static_cast<double>(got.size()), 0.999);
}

TEST(Inference, EnsembleOfFreshHeadsEqualsSingleHead) {
    SegModel single = pretrained().clone();
    SegModel grown = grow(pretrained(), 4);
    const Tensor x = fx().tgt_val.images(0, 4);
    SeededRng rng(3);
    const auto e = infer_ensemble(grown, x, rng, true, 0.95f, false);
    EXPECT_EQ(e.labels, infer_single(single, x, true));
    EXPECT_TRUE(bitwise_equal(e.mean.data(), single.forward_head(x, 0, Mode::eval, nullptr, nullptr).data()));
    SeededRng a(9), b(9);
    const auto ra = infer_ensemble(grown, x, a, true, 0.95f), rb = infer_ensemble(grown, x, b, true, 0.95f);
    EXPECT_EQ(ra.labels, rb.labels);
    EXPECT_TRUE(bitwise_equal(ra.mean.data(), rb.mean.data()));
    EXPECT_EQ(infer_single(single, x, true), infer_single(single, x, true));
}

TEST(Evaluate, RejectsClassMismatchAndUnlabeled) {
    SegModel m = pretrained().clone();
    EXPECT_THROW(evaluate(m, fx().tgt_train, {}), std::invalid_argument);
    SliceSet two = fx().tgt_val;
    two.classes = 2;
    EXPECT_THROW(evaluate(m, two, {}), std::invalid_argument);
    const auto r = evaluate(m, fx().tgt_val, {});
    ASSERT_EQ(r.size(), 1u);
    EXPECT_EQ(r[0].dice.size(), 2u);
}

TEST(Adapt, DeterministicAndLogged) {
    AdaptConfig c = fx().cfg();
    c.adapt_epochs = 2;
    int bundles = 0;
    TrainHooks h;
    h.on_bundle = [&](int, int, const PseudoLabelBundle& b) {
        ++bundles;
        EXPECT_EQ(b.tau, c.tau);
        EXPECT_GT(b.step, 0u);
    };
    const auto a = adapt_upl(pretrained(), fx().tgt_train, fx().tgt_val, c, h);
    const auto b = adapt_upl(pretrained(), fx().tgt_train, fx().tgt_val, c);
    EXPECT_EQ(bundles, 4);
    EXPECT_EQ(a.model.head_count(), 2);
    expect_same_params(a.model, b.model);
    ASSERT_EQ(a.log.epochs.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(a.log.epochs[i].loss, b.log.epochs[i].loss);
        EXPECT_EQ(a.log.epochs[i].val_score, b.log.epochs[i].val_score);
        EXPECT_NEAR(a.log.epochs[i].loss, a.log.epochs[i].loss_sup + c.lambda * a.log.epochs[i].loss_ent, 1e-6);
        EXPECT_GT(a.log.epochs[i].reliability, 0.0);
    }
    EXPECT_EQ(a.optimizer.step, static_cast<std::uint64_t>(2 * (a.log.best_epoch + 1)));
}

TEST(Adapt, ValidationSetRequired) {
    AdaptConfig c = fx().cfg();
    EXPECT_THROW(adapt_upl(pretrained(), fx().tgt_train, SliceSet{}, c), std::invalid_argument);
    EXPECT_THROW(adapt_upl(pretrained(), fx().tgt_train, fx().tgt_train, c), std::invalid_argument);
    EXPECT_THROW(adapt_upl(pretrained(), SliceSet{}, fx().tgt_val, c), std::invalid_argument);
}

TEST(Adapt, EntropyOnlyWithoutTfs) {
    AdaptConfig c = fx().cfg();
    c.ablation.use_TFS = false;
    int bundles = 0;
    TrainHooks h;
    h.on_bundle = [&](int, int, const PseudoLabelBundle&) { ++bundles; };
    const auto r = adapt_upl(pretrained(), fx().tgt_train, fx().tgt_val, c, h);
    EXPECT_EQ(bundles, 0);
    EXPECT_EQ(r.log.epochs[0].loss_sup, 0.0);
    EXPECT_EQ(r.log.epochs[0].reliability, 0.0);
    EXPECT_NEAR(r.log.epochs[0].loss, c.lambda * r.log.epochs[0].loss_ent, 1e-7);
    EXPECT_FALSE(same_params(r.model, grow(pretrained(), c.K)));
}

TEST(Adapt, WithoutMaskEveryPixelIsReliable) {
    AdaptConfig c = fx().cfg();
    c.ablation.use_M = false;
    TrainHooks h;
    h.on_bundle = [&](int, int, const PseudoLabelBundle& b) { EXPECT_EQ(reliability_fraction(b), 1.0); };
    const auto r = adapt_upl(pretrained(), fx().tgt_train, fx().tgt_val, c, h);
    EXPECT_EQ(r.log.epochs[0].reliability, 1.0);
}

TEST(Adapt, FullyMaskedStepWithZeroLambdaChangesNothing) {
    // A damped output layer keeps every pixel near uniform, so tau = 0.9
    // masks everything and the TFS gradient vanishes.
    AdaptConfig c = fx().cfg();
    c.lambda = 0.0f;
    c.tau = 0.9f;
    SeededRng init(4);
    SegModel fresh = SegModel::create(c.arch, 3, init);
    for (auto& p : fresh.parameters())
        if (p.name.ends_with(".out.w"))
            for (std::size_t i = 0; i < p.tensor.numel(); ++i) p.tensor.mutable_data()[i] *= 0.05f;
    (void)fresh.forward_head(fx().tgt_val.images(0, 2), 0, Mode::train, nullptr, nullptr);
    double seen = 0;
    TrainHooks h;
    h.on_bundle = [&](int, int, const PseudoLabelBundle& b) { seen += reliability_fraction(b); };
    const auto r = adapt_upl(fresh, fx().tgt_train, fx().tgt_val, c, h);
    EXPECT_EQ(seen, 0.0);
    expect_same_params(r.model, grow(fresh, c.K));
}

TEST(Adapt, AllTogglesOffWithOneHeadIsSelfTraining) {
    AdaptConfig c = fx().cfg();
    c.K = 1;
    c.ablation = {false, false, false, false, false};
    const SliceSet one = first_cases(fx().tgt_train, 1);  // a single update step
    const auto u = adapt_upl(pretrained(), one, fx().tgt_val, c);
    const auto s = baseline_selftrain(pretrained(), one, fx().tgt_val, c);
    ASSERT_EQ(u.log.best_epoch, 0);
    ASSERT_EQ(s.log.best_epoch, 0);
    // Same update up to accumulation order in the backward pass. Adam's first
    // step is lr*g/(|g|+eps), which magnifies round-off where |g| is near eps.
    const auto pu = u.model.parameters(), ps = s.model.parameters(), p0 = pretrained().parameters();
    ASSERT_EQ(pu.size(), ps.size());
    double worst = 0, scale_ = 0;
    for (std::size_t i = 0; i < pu.size(); ++i) {
        ASSERT_EQ(pu[i].name, ps[i].name);
        for (std::size_t j = 0; j < pu[i].tensor.numel(); ++j) {
            const double du = pu[i].tensor[j] - p0[i].tensor[j], ds = ps[i].tensor[j] - p0[i].tensor[j];
            worst = std::max(worst, std::fabs(du - ds));
            scale_ = std::max(scale_, std::fabs(ds));
        }
    }
    EXPECT_GT(scale_, 0.0);
    EXPECT_LE(worst, 1e-2 * scale_);
    EXPECT_EQ(u.log.epochs[0].loss, s.log.epochs[0].loss);
}

TEST(Adapt, SwitchesReachTheForwardPass) {
    // Without transforms and dropout the two passes are identical, so the
    // first-pass pseudo label is the second pass's own argmax.
    AdaptConfig c = fx().cfg();
    c.ablation.use_T = false;
    c.ablation.use_TDG_dropout = false;
    const SliceSet one = first_cases(fx().tgt_train, 1);
    const auto a = adapt_upl(pretrained(), one, fx().tgt_val, c);
    AdaptConfig c2 = c;
    c2.ablation.use_TFS = false;
    c2.ablation.use_Lment = true;
    const auto b = adapt_upl(pretrained(), one, fx().tgt_val, c2);
    EXPECT_FALSE(same_params(a.model, b.model));
    // Heads stay identical: same inputs, same gradients.
    const auto ps = a.model.parameters();
    for (const auto& p : ps) {
        if (p.name.rfind("head1", 0) != 0) continue;
        const std::string twin = "head0" + p.name.substr(5);
        const auto it = std::find_if(ps.begin(), ps.end(), [&](const NamedParam& q) { return q.name == twin; });
        EXPECT_TRUE(bitwise_equal(p.tensor.data(), it->tensor.data())) << p.name;
    }
}

TEST(Baselines, PtbnMatchesStreamingOracle) {
    AdaptConfig c = fx().cfg();
    const SliceSet& t = fx().tgt_train;
    SegModel src = pretrained().clone();
    SegModel m = baseline_ptbn(src, t, c);
    // Non-BN state untouched.
    expect_same_params(m, src);
    // First batch norm sees conv(x) directly.
    const ConvBnAct& first = src.encoder().levels[0][0];
    std::vector<double> rm(first.bn.running_mean.begin(), first.bn.running_mean.end());
    std::vector<double> rv(first.bn.running_var.begin(), first.bn.running_var.end());
    for (const auto& b : make_batches(t, c.batch_size, nullptr)) {
        const DT y = o::conv(DT::of(t.images(b.begin, b.end)), DT::of(first.weight), DT(Shape{first.weight.dim(0)}), 1);
        const int C = y.dim(1);
        const std::size_t hw = static_cast<std::size_t>(y.dim(2)) * y.dim(3), n = static_cast<std::size_t>(y.dim(0)) * hw;
        for (int ch = 0; ch < C; ++ch) {
            double s = 0, q = 0;
            for (int i = 0; i < y.dim(0); ++i)
                for (std::size_t j = 0; j < hw; ++j) s += y[(static_cast<std::size_t>(i) * C + ch) * hw + j];
            const double mean = s / static_cast<double>(n);
            for (int i = 0; i < y.dim(0); ++i)
                for (std::size_t j = 0; j < hw; ++j) {
                    const double d = y[(static_cast<std::size_t>(i) * C + ch) * hw + j] - mean;
                    q += d * d;
                }
            rm[static_cast<std::size_t>(ch)] = 0.9 * rm[static_cast<std::size_t>(ch)] + 0.1 * mean;
            rv[static_cast<std::size_t>(ch)] = 0.9 * rv[static_cast<std::size_t>(ch)] + 0.1 * q / static_cast<double>(n - 1);
        }
    }
    const BNState& got = m.encoder().levels[0][0].bn;
    for (std::size_t ch = 0; ch < rm.size(); ++ch) {
        EXPECT_NEAR(got.running_mean[ch], rm[ch], 1e-5);
        EXPECT_NEAR(got.running_var[ch], rv[ch], 1e-5);
    }
    // No batches: nothing changes.
    SliceSet empty = t;
    empty.case_ids.clear();
    empty.pixels.clear();
    SegModel same = baseline_ptbn(src, empty, c);
    EXPECT_TRUE(bitwise_equal(same.encoder().levels[0][0].bn.running_mean, first.bn.running_mean));
}

TEST(Baselines, TentUpdatesOnlyBatchNormAffine) {
    AdaptConfig c = fx().cfg();
    c.lr_adapt = 1e-2f;
    c.batch_size = 4;  // several steps per epoch
    const SegModel& src = pretrained();
    const auto r = baseline_tent(src, fx().tgt_train, fx().tgt_val, c);
    EXPECT_GE(r.optimizer.step, 3u);
    const auto before = src.parameters(), after = r.model.parameters();
    bool affine_moved = false;
    for (std::size_t i = 0; i < before.size(); ++i) {
        const bool affine = before[i].name.ends_with(".bn.gamma") || before[i].name.ends_with(".bn.beta");
        const bool same = bitwise_equal(before[i].tensor.data(), after[i].tensor.data());
        if (!affine) EXPECT_TRUE(same) << before[i].name;
        affine_moved |= affine && !same;
    }
    EXPECT_TRUE(affine_moved);
    c.lr_adapt = 0.0f;
    expect_same_params(baseline_tent(src, fx().tgt_train, fx().tgt_val, c).model, src);
}

TEST(Baselines, SelftrainKeepsOneHead) {
    AdaptConfig c = fx().cfg();
    const auto r = baseline_selftrain(pretrained(), fx().tgt_train, fx().tgt_val, c);
    EXPECT_EQ(r.model.head_count(), 1);
    EXPECT_EQ(r.log.epochs[0].reliability, 1.0);
    EXPECT_THROW(baseline_selftrain(grow(pretrained(), 2), fx().tgt_train, fx().tgt_val, c), std::invalid_argument);
}

TEST(Baselines, FinetuneAndTargetOnly) {
    AdaptConfig c = fx().cfg();
    c.adapt_epochs = 0;
    const SliceSet labeled = first_cases(fx().data.target.train, 1);
    expect_same_params(baseline_finetune(pretrained(), labeled, fx().tgt_val, c).model, pretrained());
    c.adapt_epochs = 1;
    const auto ft = baseline_finetune(pretrained(), labeled, fx().tgt_val, c);
    EXPECT_FALSE(same_params(ft.model, pretrained()));
    EXPECT_THROW(baseline_finetune(pretrained(), SliceSet{}, fx().tgt_val, c), std::invalid_argument);
    // Target-only starts from the seeded fresh init, not from source weights.
    c.pretrain_epochs = 0;
    const auto to = baseline_target_only(labeled, fx().tgt_val, c);
    SeededRng init = SeedStreams(c.seed).stream("init");
    expect_same_params(to.model, SegModel::create(c.arch, 3, init));
    EXPECT_THROW(baseline_target_only(SliceSet{}, fx().tgt_val, c), std::invalid_argument);
}
