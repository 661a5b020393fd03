// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "upl/labels.hpp"

namespace upl {

/// Dice of class `cls`: 2|P∩G| / (|P|+|G|); 1 when both are empty.
inline double dice(const LabelVolume& pred, const LabelVolume& gt, int cls) {
    if (!pred.same_shape(gt)) throw std::invalid_argument("dice: shape mismatch");
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred.labels[i] == cls, b = gt.labels[i] == cls;
        p += a;
        g += b;
        both += a && b;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// Binary mask stack, depth x height x width.
struct MaskVolume {
    int depth = 0, height = 0, width = 0;
    std::vector<std::uint8_t> on;

    static MaskVolume of_class(const LabelVolume& v, int cls) { return {v.depth, v.height, v.width, class_mask(v, cls)}; }
    bool empty() const { return std::none_of(on.begin(), on.end(), [](std::uint8_t b) { return b != 0; }); }
};

namespace detail {

/// Mask pixels with an in-plane 4-neighbour outside the mask or on the border.
inline std::vector<std::uint8_t> boundary(const MaskVolume& m) {
    std::vector<std::uint8_t> b(m.on.size(), 0);
    const int H = m.height, W = m.width;
    for (int z = 0; z < m.depth; ++z) {
        const std::size_t off = static_cast<std::size_t>(z) * H * W;
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const std::size_t i = off + static_cast<std::size_t>(y) * W + x;
                if (!m.on[i]) continue;
                if (y == 0 || x == 0 || y == H - 1 || x == W - 1 || !m.on[i - W] || !m.on[i + W] || !m.on[i - 1] ||
                    !m.on[i + 1]) {
                    b[i] = 1;
                }
            }
        }
    }
    return b;
}

/// Exact 1D squared distance transform (lower envelope of parabolas).
inline void edt_1d(const double* f, int n, std::ptrdiff_t stride, double* out, std::vector<int>& v, std::vector<double>& z,
                   std::vector<double>& tmp) {
    v.resize(static_cast<std::size_t>(n));
    z.resize(static_cast<std::size_t>(n) + 1);
    tmp.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) tmp[static_cast<std::size_t>(i)] = f[i * stride];
    constexpr double inf = std::numeric_limits<double>::infinity();
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (tmp[static_cast<std::size_t>(q)] == inf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        double s;
        while (true) {
            const int p = v[static_cast<std::size_t>(k)];
            s = ((tmp[static_cast<std::size_t>(q)] + static_cast<double>(q) * q) -
                 (tmp[static_cast<std::size_t>(p)] + static_cast<double>(p) * p)) /
                (2.0 * (q - p));
            if (s <= z[static_cast<std::size_t>(k)] && k > 0) {
                --k;
            } else {
                break;
            }
        }
        if (s <= z[static_cast<std::size_t>(k)]) {  // k == 0: q dominates everything
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k) + 1] = inf;
    }
    if (k < 0) {
        for (int i = 0; i < n; ++i) out[i * stride] = inf;
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
        const int p = v[static_cast<std::size_t>(j)];
        out[q * stride] = static_cast<double>(q - p) * (q - p) + tmp[static_cast<std::size_t>(p)];
    }
}

/// Squared Euclidean distance from every voxel to the nearest site.
inline std::vector<double> squared_distance_to(const std::vector<std::uint8_t>& sites, int D, int H, int W) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> d(sites.size());
    for (std::size_t i = 0; i < sites.size(); ++i) d[i] = sites[i] ? 0.0 : inf;
    std::vector<int> v;
    std::vector<double> z, tmp;
    const std::ptrdiff_t sx = 1, sy = W, sz = static_cast<std::ptrdiff_t>(H) * W;
    for (int k = 0; k < D; ++k) {
        for (int y = 0; y < H; ++y) {
            double* row = d.data() + k * sz + y * sy;
            edt_1d(row, W, sx, row, v, z, tmp);
        }
    }
    for (int k = 0; k < D; ++k) {
        for (int x = 0; x < W; ++x) {
            double* col = d.data() + k * sz + x;
            edt_1d(col, H, sy, col, v, z, tmp);
        }
    }
    if (D > 1) {
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                double* col = d.data() + y * sy + x;
                edt_1d(col, D, sz, col, v, z, tmp);
            }
        }
    }
    return d;
}

}  // namespace detail

/// Average symmetric surface distance in pixels (slice index counts as one
/// pixel of distance). Empty when either mask is empty.
inline std::optional<double> assd(const MaskVolume& pred, const MaskVolume& gt) {
    if (pred.depth != gt.depth || pred.height != gt.height || pred.width != gt.width || pred.on.size() != gt.on.size()) {
        throw std::invalid_argument("assd: shape mismatch");
    }
    if (pred.empty() || gt.empty()) return std::nullopt;
    const auto bp = detail::boundary(pred);
    const auto bg = detail::boundary(gt);
    const auto dp = detail::squared_distance_to(bp, pred.depth, pred.height, pred.width);
    const auto dg = detail::squared_distance_to(bg, gt.depth, gt.height, gt.width);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < bp.size(); ++i) {
        if (bp[i]) {
            total += std::sqrt(dg[i]);
            ++count;
        }
        if (bg[i]) {
            total += std::sqrt(dp[i]);
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
};

/// Two-sided paired Student's t-test on a - b with n-1 degrees of freedom.
/// Throws std::domain_error for n < 2 or zero-variance differences.
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: length mismatch");
    const std::size_t n = a.size();
    if (n < 2) throw std::domain_error("paired_t_test: need at least 2 pairs");
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i] - mean;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (!(sd > 0.0)) throw std::domain_error("paired_t_test: differences have zero variance");
    TTestResult r;
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    const boost::math::students_t dist(static_cast<double>(n - 1));
    r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t)));
    return r;
}

struct CaseResult {
    std::string method;
    int case_id = 0;
    std::vector<double> dice;                // per foreground class (index 0 = class 1)
    std::vector<std::optional<double>> assd; // per foreground class, empty = undefined
};

inline CaseResult evaluate_case(const std::string& method, int case_id, const LabelVolume& pred, const LabelVolume& gt,
                                int classes) {
    CaseResult r{method, case_id, {}, {}};
    for (int c = 1; c < classes; ++c) {
        r.dice.push_back(dice(pred, gt, c));
        r.assd.push_back(assd(MaskVolume::of_class(pred, c), MaskVolume::of_class(gt, c)));
    }
    return r;
}

struct ClassSummary {
    std::string method;
    int cls = 0;  // foreground class index (1-based class label)
    std::size_t cases = 0;
    double dice_mean = 0.0, dice_sd = 0.0;
    double assd_mean = 0.0, assd_sd = 0.0;
    std::size_t assd_empty = 0;  // cases excluded from the ASSD statistics
};

namespace detail {
inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
    if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return {m, std::sqrt(s / static_cast<double>(v.size()))};
}
}  // namespace detail

/// Mean and population standard deviation per (method, class).
inline std::vector<ClassSummary> aggregate(const std::vector<CaseResult>& results) {
    if (results.empty()) throw std::invalid_argument("aggregate: no results");
    std::map<std::pair<std::string, int>, std::pair<std::vector<double>, std::vector<double>>> groups;
    std::map<std::pair<std::string, int>, std::size_t> empties;
    for (const auto& r : results) {
        for (std::size_t c = 0; c < r.dice.size(); ++c) {
            const auto key = std::make_pair(r.method, static_cast<int>(c) + 1);
            groups[key].first.push_back(r.dice[c]);
            if (c < r.assd.size() && r.assd[c]) {
                groups[key].second.push_back(*r.assd[c]);
            } else {
                ++empties[key];
            }
        }
    }
    std::vector<ClassSummary> out;
    for (const auto& [key, vals] : groups) {
        ClassSummary s;
        s.method = key.first;
        s.cls = key.second;
        s.cases = vals.first.size();
        std::tie(s.dice_mean, s.dice_sd) = detail::mean_sd(vals.first);
        std::tie(s.assd_mean, s.assd_sd) = detail::mean_sd(vals.second);
        s.assd_empty = empties[key];
        out.push_back(s);
    }
    return out;
}

/// Mean foreground Dice over cases and classes.
inline double mean_foreground_dice(const std::vector<CaseResult>& results) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : results) {
        for (double d : r.dice) {
            s += d;
            ++n;
        }
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace upl
