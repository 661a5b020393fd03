// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "upl/tensor.hpp"

namespace upl {

/// Stack of `depth` label planes (class index per pixel), row-major.
struct LabelVolume {
    int depth = 0;
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> labels;

    LabelVolume() = default;
    LabelVolume(int d, int h, int w, std::uint8_t fill = 0)
        : depth(d), height(h), width(w), labels(static_cast<std::size_t>(d) * h * w, fill) {}

    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
    std::size_t size() const { return labels.size(); }
    std::uint8_t at(int z, int y, int x) const {
        return labels[static_cast<std::size_t>(z) * plane() + static_cast<std::size_t>(y) * width + x];
    }
    std::uint8_t& at(int z, int y, int x) {
        return labels[static_cast<std::size_t>(z) * plane() + static_cast<std::size_t>(y) * width + x];
    }
    bool same_shape(const LabelVolume& o) const { return depth == o.depth && height == o.height && width == o.width; }

    friend bool operator==(const LabelVolume&, const LabelVolume&) = default;
};

/// Binary mask of one class.
inline std::vector<std::uint8_t> class_mask(const LabelVolume& v, int cls) {
    std::vector<std::uint8_t> m(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) m[i] = v.labels[i] == cls ? 1 : 0;
    return m;
}

/// Per-pixel argmax over dim 1 of [B,C,H,W]; ties resolve to the lowest class.
inline LabelVolume argmax_channels(const Tensor& p) {
    if (p.rank() != 4) throw ShapeError("argmax_channels: expected [B,C,H,W]");
    const int B = p.dim(0), C = p.dim(1), H = p.dim(2), W = p.dim(3);
    if (C > 255) throw ShapeError("argmax_channels: too many classes");
    LabelVolume out(B, H, W);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    const float* d = p.data().data();
    for (int b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < hw; ++i) {
            int best = 0;
            float bv = d[(static_cast<std::size_t>(b) * C) * hw + i];
            for (int c = 1; c < C; ++c) {
                const float v = d[(static_cast<std::size_t>(b) * C + c) * hw + i];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            out.labels[static_cast<std::size_t>(b) * hw + i] = static_cast<std::uint8_t>(best);
        }
    }
    return out;
}

/// One-hot encoding [B,C,H,W] of a label volume.
inline Tensor one_hot(const LabelVolume& v, int classes) {
    Tensor t(Shape{v.depth, classes, v.height, v.width});
    const std::size_t hw = v.plane();
    auto d = t.mutable_data();
    for (int b = 0; b < v.depth; ++b) {
        for (std::size_t i = 0; i < hw; ++i) {
            const int c = v.labels[static_cast<std::size_t>(b) * hw + i];
            if (c >= classes) throw std::invalid_argument("one_hot: label exceeds class count");
            d[(static_cast<std::size_t>(b) * classes + c) * hw + i] = 1.0f;
        }
    }
    return t;
}

/// 4-connected components of the pixels equal to `cls` within one plane.
/// Returns a component id per pixel (-1 outside the class) and the sizes of
/// components in discovery (row-major first pixel) order.
inline std::vector<int> label_components(const std::uint8_t* plane, int h, int w, int cls, std::vector<int>& sizes) {
    std::vector<int> comp(static_cast<std::size_t>(h) * w, -1);
    sizes.clear();
    std::vector<int> stack;
    for (int start = 0; start < h * w; ++start) {
        if (plane[start] != cls || comp[static_cast<std::size_t>(start)] >= 0) continue;
        const int id = static_cast<int>(sizes.size());
        int count = 0;
        stack.assign(1, start);
        comp[static_cast<std::size_t>(start)] = id;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            ++count;
            const int y = p / w, x = p % w;
            const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
            for (const auto& q : nb) {
                if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
                const int j = q[0] * w + q[1];
                if (plane[j] == cls && comp[static_cast<std::size_t>(j)] < 0) {
                    comp[static_cast<std::size_t>(j)] = id;
                    stack.push_back(j);
                }
            }
        }
        sizes.push_back(count);
    }
    return comp;
}

/// Keeps, per slice and per foreground class, only the largest 4-connected
/// component; other pixels of that class become background (0). Equal sizes
/// keep the component whose first pixel comes first in row-major order.
inline void keep_largest_components(LabelVolume& v, int classes) {
    std::vector<int> sizes;
    for (int z = 0; z < v.depth; ++z) {
        std::uint8_t* plane = v.labels.data() + static_cast<std::size_t>(z) * v.plane();
        for (int c = 1; c < classes; ++c) {
            const auto comp = label_components(plane, v.height, v.width, c, sizes);
            if (sizes.size() < 2) continue;
            int keep = 0;
            for (int i = 1; i < static_cast<int>(sizes.size()); ++i) {
                if (sizes[static_cast<std::size_t>(i)] > sizes[static_cast<std::size_t>(keep)]) keep = i;
            }
            for (std::size_t i = 0; i < v.plane(); ++i) {
                if (comp[i] >= 0 && comp[i] != keep) plane[i] = 0;
            }
        }
    }
}

}  // namespace upl
