// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. All maps are [B,C,H,W]; per-image values are averaged
// over the batch.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "upl/ops.hpp"
#include "upl/pseudolabel.hpp"
#include "upl/tensor.hpp"

namespace upl {

inline constexpr float kDiceEta = 1e-5f;
inline constexpr float kLogFloor = 1e-12f;

struct LossValue {
    Tensor value;  // one element, taped when its inputs are
    std::string name;

    float item() const { return value.item(); }
};

namespace detail {

inline void check_binary_mask(const Tensor& m) {
    for (float v : m.data()) {
        if (v != 0.0f && v != 1.0f) throw std::invalid_argument("reliability map must be binary");
    }
}

inline void check_one_hot(const Tensor& y) {
    const int B = y.dim(0), C = y.dim(1);
    const std::size_t hw = static_cast<std::size_t>(y.dim(2)) * y.dim(3);
    for (int b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < hw; ++i) {
            float s = 0.0f;
            for (int c = 0; c < C; ++c) {
                const float v = y[(static_cast<std::size_t>(b) * C + c) * hw + i];
                if (v != 0.0f && v != 1.0f) throw std::invalid_argument("pseudo label must be one-hot");
                s += v;
            }
            if (s != 1.0f) throw std::invalid_argument("pseudo label must be one-hot");
        }
    }
}

/// [B,1,H,W] -> [B,C,H,W] by channel replication (constant helper).
inline Tensor broadcast_mask(const Tensor& m, int classes) {
    const int B = m.dim(0);
    const std::size_t hw = static_cast<std::size_t>(m.dim(2)) * m.dim(3);
    Tensor out(Shape{B, classes, m.dim(2), m.dim(3)});
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < classes; ++c) {
            std::copy_n(m.data().data() + static_cast<std::size_t>(b) * hw, hw,
                        out.mutable_data().data() + (static_cast<std::size_t>(b) * classes + c) * hw);
        }
    }
    return out;
}

}  // namespace detail

/// Reliability-weighted Dice:
///   1 - (1/C) sum_c [sum_n 2 M_n p_cn y_cn] / [sum_n M_n (p_cn + y_cn) + eta]
/// computed per image (background included) and averaged over the batch.
/// `y_tilde` and `mask` are constants.
inline LossValue weighted_dice(const Tensor& p, const Tensor& y_tilde, const Tensor& mask) {
    if (p.rank() != 4) throw ShapeError("weighted_dice: expected [B,C,H,W]");
    if (y_tilde.shape() != p.shape()) throw ShapeError("weighted_dice: label shape mismatch");
    if (mask.rank() != 4 || mask.dim(0) != p.dim(0) || mask.dim(1) != 1 || mask.dim(2) != p.dim(2) ||
        mask.dim(3) != p.dim(3)) {
        throw ShapeError("weighted_dice: mask must be [B,1,H,W], got " + shape_str(mask.shape()));
    }
    detail::check_binary_mask(mask);
    detail::check_one_hot(y_tilde);
    const int B = p.dim(0), C = p.dim(1);
    const Tensor mc = detail::broadcast_mask(mask, C);
    const Tensor my = mul(mc, y_tilde.detach());
    const Tensor num = scale(sum_hw(mul(p, my)), 2.0f);
    const Tensor den = add(sum_hw(mul(p, mc)), add_scalar(sum_hw(my), kDiceEta));
    const Tensor ratio = div(num, den);  // [B,C]
    const Tensor loss = add_scalar(scale(sum(ratio), -1.0f / static_cast<float>(B * C)), 1.0f);
    return {loss, "w-dice"};
}

/// Supervised Dice: weighted_dice with an all-ones reliability map.
inline LossValue dice_loss_supervised(const Tensor& p, const Tensor& y) {
    const Tensor ones(Shape{p.dim(0), 1, p.dim(2), p.dim(3)}, 1.0f);
    auto l = weighted_dice(p, y, ones);
    l.name = "dice";
    return l;
}

/// Mean over heads of the reliability-weighted Dice against one bundle.
inline LossValue tfs_loss(const std::vector<Tensor>& heads, const PseudoLabelBundle& bundle, int expected_heads) {
    if (heads.empty() || static_cast<int>(heads.size()) != expected_heads) {
        throw std::invalid_argument("tfs_loss: got " + std::to_string(heads.size()) + " head outputs, model has " +
                                    std::to_string(expected_heads));
    }
    std::vector<Tensor> terms;
    for (const auto& h : heads) terms.push_back(weighted_dice(h, bundle.y_tilde, bundle.reliability).value);
    return {average(terms), "tfs"};
}

namespace detail {

/// -(1/(B*H*W)) sum p ln p over a single [B,C,H,W] map.
inline Tensor entropy_of(const Tensor& p) {
    const float norm = static_cast<float>(p.dim(0)) * static_cast<float>(p.dim(2)) * static_cast<float>(p.dim(3));
    return scale(sum(mul(p, log_clamped(p, kLogFloor))), -1.0f / norm);
}

}  // namespace detail

/// Entropy of the across-head mean prediction, normalized by H*W per image.
inline LossValue mean_entropy(const std::vector<Tensor>& heads) {
    if (heads.empty()) throw std::invalid_argument("mean_entropy: no heads");
    return {detail::entropy_of(average(heads)), "ment"};
}

/// Average of each head's own entropy.
inline LossValue per_head_entropy(const std::vector<Tensor>& heads) {
    if (heads.empty()) throw std::invalid_argument("per_head_entropy: no heads");
    std::vector<Tensor> terms;
    for (const auto& h : heads) terms.push_back(detail::entropy_of(h));
    return {average(terms), "ent"};
}

/// tfs + lambda * ment
inline LossValue total_loss(const LossValue& tfs, const LossValue& ment, float lambda) {
    if (!(lambda >= 0.0f)) throw std::invalid_argument("total_loss: lambda must be non-negative");
    return {add(tfs.value, scale(ment.value, lambda)), "total"};
}

}  // namespace upl
