// SPDX-License-Identifier: Apache-2.0
//
// Exact spatial perturbations: horizontal/vertical flips followed by
// counter-clockwise quarter turns. All are pixel permutations, so the
// inverse is exact.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "upl/ops.hpp"
#include "upl/rng.hpp"
#include "upl/tensor.hpp"

namespace upl {

struct SpatialTransform {
    bool flip_h = false;  // mirror columns
    bool flip_v = false;  // mirror rows
    int quarter_turns = 0;  // 0..3, counter-clockwise

    static SpatialTransform identity() { return {}; }

    bool is_identity() const { return !flip_h && !flip_v && quarter_turns == 0; }

    /// Index in [0,16): flip_h * 8 + flip_v * 4 + quarter_turns.
    int code() const { return (flip_h ? 8 : 0) + (flip_v ? 4 : 0) + quarter_turns; }

    static SpatialTransform from_code(int c) {
        if (c < 0 || c >= 16) throw std::invalid_argument("transform code out of range");
        return {(c & 8) != 0, (c & 4) != 0, c & 3};
    }

    friend bool operator==(const SpatialTransform&, const SpatialTransform&) = default;
};

/// Applying the result after `t` restores the original pixel order.
/// A single reflection composed with a rotation is an involution; with no
/// flip or both flips (= half turn) only the rotation needs undoing.
inline SpatialTransform inverse(const SpatialTransform& t) {
    SpatialTransform r = t;
    if (t.flip_h == t.flip_v) r.quarter_turns = (4 - t.quarter_turns) % 4;
    return r;
}

/// Uniform over the 16 flip x rotation combinations.
inline SpatialTransform sample_transform(SeededRng& rng) {
    return SpatialTransform::from_code(static_cast<int>(rng.below(16)));
}

/// Output size of `t` applied to an h x w plane.
inline std::pair<int, int> transformed_size(const SpatialTransform& t, int h, int w) {
    if (t.quarter_turns % 2 == 1) return {w, h};
    return {h, w};
}

/// For each output pixel (row-major), the row-major index of its source
/// pixel in the h x w input plane.
inline std::vector<std::uint32_t> source_index(const SpatialTransform& t, int h, int w) {
    if (t.quarter_turns < 0 || t.quarter_turns > 3) throw std::invalid_argument("quarter_turns must be 0..3");
    if (t.quarter_turns % 2 == 1 && h != w) {
        throw ShapeError("odd quarter turns need a square plane, got " + std::to_string(h) + "x" + std::to_string(w));
    }
    const auto [oh, ow] = transformed_size(t, h, w);
    std::vector<std::uint32_t> idx(static_cast<std::size_t>(oh) * ow);
    for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
            // walk back through the rotations: one ccw turn maps
            // out[r][c] <- in[c][n-1-r] where n is the output width
            int rr = r, cc = c, curh = oh, curw = ow;
            for (int q = 0; q < t.quarter_turns; ++q) {
                const int pr = cc, pc = curh - 1 - rr;
                rr = pr;
                cc = pc;
                std::swap(curh, curw);
            }
            if (t.flip_v) rr = h - 1 - rr;
            if (t.flip_h) cc = w - 1 - cc;
            idx[static_cast<std::size_t>(r) * ow + c] = static_cast<std::uint32_t>(rr * w + cc);
        }
    }
    return idx;
}

/// Permutes the trailing two dims of x. Differentiable.
inline Tensor apply(const SpatialTransform& t, const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("apply: rank must be at least 2");
    if (t.is_identity()) return x;
    const int h = x.dim(-2), w = x.dim(-1);
    const auto [oh, ow] = transformed_size(t, h, w);
    return gather_hw(x, source_index(t, h, w), oh, ow);
}

/// Plane-wise permutation of a stack of h x w planes of any element type.
template <class T>
std::vector<T> apply_planes(const SpatialTransform& t, const std::vector<T>& planes, int h, int w) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (plane == 0 || planes.size() % plane) throw ShapeError("apply_planes: size is not a multiple of h*w");
    const auto idx = source_index(t, h, w);
    std::vector<T> out(planes.size());
    for (std::size_t p = 0; p < planes.size() / plane; ++p) {
        for (std::size_t i = 0; i < plane; ++i) out[p * plane + i] = planes[p * plane + idx[i]];
    }
    return out;
}

}  // namespace upl
