// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder segmentation network with a shared encoder and K decoder
// heads. A pre-trained single-head model is grown into K identical heads, each
// preceded by its own dropout gate.

#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "upl/ops.hpp"
#include "upl/optim.hpp"
#include "upl/rng.hpp"
#include "upl/tensor.hpp"

namespace upl {

inline constexpr int kMaxHeads = 8;
inline constexpr float kLeakySlope = 0.01f;

struct ArchConfig {
    int levels = 2;
    int base_channels = 8;
    int kernel = 3;
    float dropout_rate = 0.5f;
    int in_channels = 1;

    void validate() const {
        if (levels < 1) throw std::invalid_argument("arch: levels must be >= 1");
        if (base_channels < 2) throw std::invalid_argument("arch: base_channels must be >= 2");
        if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("arch: kernel must be odd");
        if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f)) throw std::invalid_argument("arch: dropout_rate in [0,1)");
        if (in_channels < 1) throw std::invalid_argument("arch: in_channels must be >= 1");
    }

    int channels_at(int level) const { return base_channels << level; }

    friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

enum class ParamGroup { all, bn_affine_only };

/// conv (no bias) -> batch norm -> leaky ReLU
struct ConvBnAct {
    Tensor weight;
    BNState bn;

    ConvBnAct clone() const { return {weight.clone(), bn.clone()}; }
};

struct EncoderParams {
    std::vector<std::array<ConvBnAct, 2>> levels;  // levels + 1 entries, last is the bottleneck
};

struct HeadParams {
    std::vector<ConvBnAct> up;                     // up[i]: channels(i+1) -> channels(i)
    std::vector<std::array<ConvBnAct, 2>> blocks;  // blocks[i]: 2*channels(i) -> channels(i)
    Tensor out_weight;                             // [C, channels(0), 1, 1]
    Tensor out_bias;                               // [C]

    HeadParams clone() const {
        HeadParams h;
        for (const auto& u : up) h.up.push_back(u.clone());
        for (const auto& b : blocks) h.blocks.push_back({b[0].clone(), b[1].clone()});
        h.out_weight = out_weight.clone();
        h.out_bias = out_bias.clone();
        return h;
    }
};

/// Encoder outputs: per-level skip features, last entry is the bottleneck.
using Features = std::vector<Tensor>;

struct BNRef {
    std::string name;
    BNState* state;
};

class SegModel {
   public:
    SegModel() = default;

    /// Fresh single-head model with He-normal conv weights.
    static SegModel create(const ArchConfig& arch, int classes, SeededRng& init_rng) {
        arch.validate();
        if (classes < 2) throw std::invalid_argument("model: need at least 2 classes");
        SegModel m;
        m.arch_ = arch;
        m.classes_ = classes;
        const int k = arch.kernel;
        auto conv = [&](int cin, int cout) {
            ConvBnAct c;
            c.weight = he_normal(Shape{cout, cin, k, k}, cin * k * k, init_rng);
            c.bn = BNState(cout);
            return c;
        };
        int cin = arch.in_channels;
        for (int l = 0; l <= arch.levels; ++l) {
            const int c = arch.channels_at(l);
            m.encoder_.levels.push_back({conv(cin, c), conv(c, c)});
            cin = c;
        }
        HeadParams h;
        for (int l = 0; l < arch.levels; ++l) {
            const int c = arch.channels_at(l);
            h.up.push_back(conv(arch.channels_at(l + 1), c));
            h.blocks.push_back({conv(2 * c, c), conv(c, c)});
        }
        h.out_weight = he_normal(Shape{classes, arch.channels_at(0), 1, 1}, arch.channels_at(0), init_rng);
        h.out_bias = Tensor(Shape{classes}, 0.0f);
        h.out_bias.set_requires_grad(true);
        m.heads_.push_back(std::move(h));
        return m;
    }

    const ArchConfig& arch() const { return arch_; }
    int classes() const { return classes_; }
    int head_count() const { return static_cast<int>(heads_.size()); }
    bool dropout_gates() const { return dropout_gates_; }
    void set_dropout_gates(bool on) { dropout_gates_ = on; }

    const EncoderParams& encoder() const { return encoder_; }
    const HeadParams& head(int k) const { return heads_.at(static_cast<std::size_t>(k)); }

    /// Deep copy; no storage shared with this model.
    SegModel clone() const {
        SegModel m;
        m.arch_ = arch_;
        m.classes_ = classes_;
        m.dropout_gates_ = dropout_gates_;
        for (const auto& l : encoder_.levels) m.encoder_.levels.push_back({l[0].clone(), l[1].clone()});
        for (const auto& h : heads_) m.heads_.push_back(h.clone());
        return m;
    }

    /// Trainable tensors in a fixed order with stable names. The returned
    /// tensors share storage with the model.
    std::vector<NamedParam> parameters(ParamGroup group = ParamGroup::all) const {
        std::vector<NamedParam> out;
        auto add_cba = [&](const std::string& prefix, const ConvBnAct& c) {
            if (group == ParamGroup::all) out.push_back({prefix + ".w", c.weight});
            out.push_back({prefix + ".bn.gamma", c.bn.gamma});
            out.push_back({prefix + ".bn.beta", c.bn.beta});
        };
        for (std::size_t l = 0; l < encoder_.levels.size(); ++l) {
            for (int j = 0; j < 2; ++j) add_cba(enc_name(l, j), encoder_.levels[l][static_cast<std::size_t>(j)]);
        }
        for (std::size_t k = 0; k < heads_.size(); ++k) {
            const auto& h = heads_[k];
            for (std::size_t l = 0; l < h.up.size(); ++l) {
                add_cba(head_prefix(k) + ".up" + std::to_string(l), h.up[l]);
                for (int j = 0; j < 2; ++j) {
                    add_cba(head_prefix(k) + ".dec" + std::to_string(l) + ".c" + std::to_string(j),
                            h.blocks[l][static_cast<std::size_t>(j)]);
                }
            }
            if (group == ParamGroup::all) {
                out.push_back({head_prefix(k) + ".out.w", h.out_weight});
                out.push_back({head_prefix(k) + ".out.b", h.out_bias});
            }
        }
        return out;
    }

    /// Every batch-norm layer with its name prefix (e.g. "enc.L0.c1.bn").
    std::vector<BNRef> bn_layers() {
        std::vector<BNRef> out;
        for (std::size_t l = 0; l < encoder_.levels.size(); ++l) {
            for (int j = 0; j < 2; ++j) out.push_back({enc_name(l, j) + ".bn", &encoder_.levels[l][static_cast<std::size_t>(j)].bn});
        }
        for (std::size_t k = 0; k < heads_.size(); ++k) {
            auto& h = heads_[k];
            for (std::size_t l = 0; l < h.up.size(); ++l) {
                out.push_back({head_prefix(k) + ".up" + std::to_string(l) + ".bn", &h.up[l].bn});
                for (int j = 0; j < 2; ++j) {
                    out.push_back({head_prefix(k) + ".dec" + std::to_string(l) + ".c" + std::to_string(j) + ".bn",
                                   &h.blocks[l][static_cast<std::size_t>(j)].bn});
                }
            }
        }
        return out;
    }

    std::size_t parameter_count(ParamGroup group = ParamGroup::all) const {
        std::size_t n = 0;
        for (const auto& p : parameters(group)) n += p.tensor.numel();
        return n;
    }

    void check_input(const Tensor& x) const {
        if (x.rank() != 4 || x.dim(1) != arch_.in_channels) {
            throw ShapeError("model input must be [B," + std::to_string(arch_.in_channels) + ",H,W], got " +
                             shape_str(x.shape()));
        }
        const int div = 1 << arch_.levels;
        if (x.dim(2) % div || x.dim(3) % div) {
            throw ShapeError("spatial size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                             " is not divisible by " + std::to_string(div));
        }
    }

    /// Shared feature extractor. Batch-norm running statistics are updated in
    /// train mode.
    Features encode(const Tensor& x, Mode mode, Tape* tape) {
        check_input(x);
        Features f;
        Tensor h = x;
        for (std::size_t l = 0; l < encoder_.levels.size(); ++l) {
            if (l > 0) h = maxpool2d(h);
            h = apply_block(encoder_.levels[l][0], h, mode, tape);
            h = apply_block(encoder_.levels[l][1], h, mode, tape);
            f.push_back(h);
        }
        return f;
    }

    /// Decoder head `k` (0-based) on encoder features; returns softmax
    /// probabilities [B,C,H,W]. When this head's dropout gate is active
    /// (gates grown, `use_dropout`, train mode) every feature map entering the
    /// head is passed through dropout with masks drawn from `rng`.
    Tensor decode(const Features& f, int k, Mode mode, bool use_dropout, SeededRng* rng, Tape* tape) {
        if (k < 0 || k >= head_count()) throw std::out_of_range("head index " + std::to_string(k) + " out of range");
        auto& h = heads_[static_cast<std::size_t>(k)];
        const bool drop = dropout_gates_ && use_dropout && mode == Mode::train && arch_.dropout_rate > 0.0f;
        if (drop && !rng) throw std::invalid_argument("decode: dropout requires an rng");
        auto gate = [&](const Tensor& t) { return drop ? dropout(t, arch_.dropout_rate, *rng, mode) : t; };

        Tensor d = gate(f.back());
        for (int l = arch_.levels - 1; l >= 0; --l) {
            const auto li = static_cast<std::size_t>(l);
            Tensor u = apply_block(h.up[li], upsample_nearest2x(d), mode, tape);
            Tensor s = gate(f[li]);
            d = concat_channels(u, s);
            d = apply_block(h.blocks[li][0], d, mode, tape);
            d = apply_block(h.blocks[li][1], d, mode, tape);
        }
        Tensor logits = conv2d(d, watch(h.out_weight, tape), watch(h.out_bias, tape), 0);
        return softmax_channel(logits);
    }

    /// Probability map of head `k` for input x [B,in,H,W].
    Tensor forward_head(const Tensor& x, int k, Mode mode, SeededRng* rng, Tape* tape, bool use_dropout = true) {
        const Features f = encode(x, mode, tape);
        return decode(f, k, mode, use_dropout, rng, tape);
    }

    friend SegModel grow(const SegModel& single, int k);

   private:
    static Tensor he_normal(Shape s, int fan_in, SeededRng& rng) {
        Tensor t(std::move(s));
        const double sd = std::sqrt(2.0 / fan_in);
        for (auto& v : t.mutable_data()) v = static_cast<float>(rng.normal() * sd);
        t.set_requires_grad(true);
        return t;
    }

    static Tensor watch(const Tensor& t, Tape* tape) { return tape ? tape->watch(t) : t; }

    Tensor apply_block(ConvBnAct& c, const Tensor& x, Mode mode, Tape* tape) {
        const int k = static_cast<int>(c.weight.dim(2));
        const Tensor zero_bias(Shape{c.weight.dim(0)}, 0.0f);
        Tensor y = conv2d(x, watch(c.weight, tape), zero_bias, (k - 1) / 2);
        y = batchnorm2d(y, c.bn, mode, watch(c.bn.gamma, tape), watch(c.bn.beta, tape));
        return leaky_relu(y, kLeakySlope);
    }

    static std::string enc_name(std::size_t level, int j) {
        return "enc.L" + std::to_string(level) + ".c" + std::to_string(j);
    }
    static std::string head_prefix(std::size_t k) { return "head" + std::to_string(k); }

    ArchConfig arch_;
    int classes_ = 0;
    bool dropout_gates_ = false;
    EncoderParams encoder_;
    std::vector<HeadParams> heads_;
};

/// Duplicates the single pre-trained head K times (bitwise copies) and
/// enables a dropout gate in front of each head. The encoder is unchanged.
inline SegModel grow(const SegModel& single, int k) {
    if (single.head_count() != 1) throw std::invalid_argument("grow: model must have exactly one head");
    if (k < 1 || k > kMaxHeads) {
        throw std::invalid_argument("grow: head count must be in [1," + std::to_string(kMaxHeads) + "]");
    }
    SegModel m = single.clone();
    m.heads_.clear();
    for (int i = 0; i < k; ++i) m.heads_.push_back(single.heads_.front().clone());
    m.dropout_gates_ = true;
    return m;
}

inline std::vector<NamedParam> parameter_groups(const SegModel& m, ParamGroup g) { return m.parameters(g); }

}  // namespace upl
