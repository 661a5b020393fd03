// SPDX-License-Identifier: Apache-2.0
//
// Ensembled pseudo labels: mean of K head probability maps, argmax label with
// optional largest-component cleanup, and a binary reliability map that marks
// pixels whose mean top-class probability exceeds tau.

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "upl/labels.hpp"
#include "upl/ops.hpp"
#include "upl/tensor.hpp"

namespace upl {

struct ProbEnsemble {
    std::vector<Tensor> per_head;  // each [B,C,H,W], already mapped back to the input frame
    Tensor mean;                   // [B,C,H,W]
};

struct PseudoLabelBundle {
    Tensor y_tilde;      // one-hot [B,C,H,W]
    Tensor reliability;  // {0,1} [B,1,H,W]
    LabelVolume labels;  // argmax (after cleanup), B x H x W
    float tau = 0.0f;
    std::uint64_t step = 0;  // update step that produced this bundle
};

/// Arithmetic mean of K probability maps (values only; never taped).
inline ProbEnsemble ensemble(const std::vector<Tensor>& per_head) {
    if (per_head.empty()) throw std::invalid_argument("ensemble: no head predictions");
    for (const auto& p : per_head) {
        if (p.shape() != per_head.front().shape()) {
            throw ShapeError("ensemble: shape mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(per_head.front().shape()));
        }
    }
    ProbEnsemble e;
    for (const auto& p : per_head) e.per_head.push_back(p.detach());
    e.mean = average(e.per_head);
    return e;
}

/// Class count C of a [B,C,H,W] map and validation of tau in (1/C, 1).
inline void check_tau(float tau, int classes) {
    if (!(tau > 1.0f / static_cast<float>(classes) && tau < 1.0f)) {
        throw std::invalid_argument("tau must lie in (1/C, 1) = (" + std::to_string(1.0 / classes) + ", 1), got " +
                                    std::to_string(tau));
    }
}

/// Reliability map from the mean probabilities: 1 where max_c mean[c] > tau.
inline Tensor reliability_map(const Tensor& mean, float tau) {
    const int B = mean.dim(0), C = mean.dim(1), H = mean.dim(2), W = mean.dim(3);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor m(Shape{B, 1, H, W});
    const float* d = mean.data().data();
    for (int b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < hw; ++i) {
            float mx = d[(static_cast<std::size_t>(b) * C) * hw + i];
            for (int c = 1; c < C; ++c) mx = std::max(mx, d[(static_cast<std::size_t>(b) * C + c) * hw + i]);
            m.mutable_data()[static_cast<std::size_t>(b) * hw + i] = mx > tau ? 1.0f : 0.0f;
        }
    }
    return m;
}

/// Argmax pseudo label (optionally cleaned to the largest component per
/// foreground class) and the reliability map, computed on the pre-cleanup
/// mean. Pixels relabeled by cleanup keep their reliability value.
inline PseudoLabelBundle make_pseudo_label(const ProbEnsemble& ens, float tau, bool cleanup, std::uint64_t step = 0) {
    const Tensor& mean = ens.mean;
    if (mean.rank() != 4) throw ShapeError("make_pseudo_label: expected [B,C,H,W] mean map");
    const int C = mean.dim(1);
    check_tau(tau, C);
    PseudoLabelBundle b;
    b.tau = tau;
    b.step = step;
    b.reliability = reliability_map(mean, tau);
    b.labels = argmax_channels(mean);
    if (cleanup) keep_largest_components(b.labels, C);
    b.y_tilde = one_hot(b.labels, C);
    return b;
}

/// Fraction of reliable pixels.
inline double reliability_fraction(const PseudoLabelBundle& b) {
    const auto d = b.reliability.data();
    if (d.empty()) return 0.0;
    double s = 0.0;
    for (float v : d) s += v;
    return s / static_cast<double>(d.size());
}

/// One 8-bit binary PGM (P5) file image.
inline std::vector<std::uint8_t> pgm_bytes(int width, int height, const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != static_cast<std::size_t>(width) * height) throw std::invalid_argument("pgm: size mismatch");
    const std::string head = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    std::vector<std::uint8_t> out(head.begin(), head.end());
    out.insert(out.end(), pixels.begin(), pixels.end());
    return out;
}

/// Slice `z` of the pseudo label, class indices spread over 0..255.
inline std::vector<std::uint8_t> label_pgm(const LabelVolume& v, int z, int classes) {
    std::vector<std::uint8_t> px(v.plane());
    const int step = classes > 1 ? 255 / (classes - 1) : 255;
    for (std::size_t i = 0; i < px.size(); ++i) {
        px[i] = static_cast<std::uint8_t>(v.labels[static_cast<std::size_t>(z) * v.plane() + i] * step);
    }
    return pgm_bytes(v.width, v.height, px);
}

/// Slice `z` of the reliability map (255 reliable, 0 not).
inline std::vector<std::uint8_t> reliability_pgm(const PseudoLabelBundle& b, int z) {
    const int H = b.reliability.dim(2), W = b.reliability.dim(3);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    std::vector<std::uint8_t> px(hw);
    for (std::size_t i = 0; i < hw; ++i) px[i] = b.reliability[static_cast<std::size_t>(z) * hw + i] > 0.5f ? 255 : 0;
    return pgm_bytes(W, H, px);
}

}  // namespace upl
