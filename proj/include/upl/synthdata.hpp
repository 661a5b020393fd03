// SPDX-License-Identifier: Apache-2.0
//
// Synthetic two-domain segmentation benchmark. Each case is a short stack of
// 64x64 slices showing an elliptical cavity (class 1) wrapped in a ring
// (class 2), plus a bright background distractor. Domains differ only in how
// labels are rendered to intensities.
//
// Dataset file layout (little-endian):
//
//   "UPLD"                4 bytes magic
//   u16 version           currently 1
//   u32 n_images, u32 classes, u32 height, u32 width
//   u32 case_id[n_images]
//   f32 pixels[n_images][height][width]
//   u8  labels[n_images][height][width]
//
// Total size: 22 + 4n + 5nHW bytes.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "upl/binary_io.hpp"
#include "upl/labels.hpp"
#include "upl/rng.hpp"
#include "upl/tensor.hpp"

namespace upl {

inline constexpr char kDatasetMagic[4] = {'U', 'P', 'L', 'D'};
inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr int kImageSize = 64;

struct ClassProfile {
    float mean = 0.0f;     // base intensity
    float texture = 0.0f;  // amplitude of the smooth texture field
};

struct DomainSpec {
    std::string name;
    ClassProfile background{0.15f, 0.05f};
    ClassProfile cavity{0.85f, 0.05f};
    ClassProfile ring{0.45f, 0.05f};
    float noise_sigma = 0.04f;
    float gamma = 1.0f;
    float bias_amplitude = 0.0f;  // multiplicative linear field, 1 +/- amplitude at the borders
    bool invert = false;
};

/// Geometry of one case. Slice z interpolates scale and center linearly.
struct CaseSpec {
    std::uint32_t case_id = 0;
    int slices = 0;
    double cx = 32, cy = 32;        // center at the first slice
    double drift_x = 0, drift_y = 0;  // center offset at the last slice
    double axis_a = 9, axis_b = 7;  // cavity semi-axes at the first slice
    double thickness = 3.5;         // ring width, constant over slices
    double angle = 0;               // ellipse orientation
    double end_scale = 0.65;        // cavity scale at the last slice
    double blob_x = 10, blob_y = 10, blob_r = 3;  // distractor
};

/// Images with optional labels, grouped into cases by contiguous case ids.
struct SliceSet {
    std::string domain;
    int classes = 0;
    int height = 0;
    int width = 0;
    std::vector<std::uint32_t> case_ids;  // per image
    std::vector<float> pixels;            // n x H x W
    std::vector<std::uint8_t> labels;     // n x H x W, empty when unlabeled

    struct CaseRange {
        std::uint32_t case_id;
        int begin, end;  // image index range
    };

    int size() const { return static_cast<int>(case_ids.size()); }
    bool labeled() const { return !labels.empty(); }
    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

    std::vector<CaseRange> cases() const {
        std::vector<CaseRange> out;
        for (int i = 0; i < size(); ++i) {
            const auto id = case_ids[static_cast<std::size_t>(i)];
            if (!out.empty() && out.back().case_id == id) {
                out.back().end = i + 1;
                continue;
            }
            for (const auto& c : out) {
                if (c.case_id == id) throw FormatError("case " + std::to_string(id) + " is not contiguous");
            }
            out.push_back({id, i, i + 1});
        }
        return out;
    }

    /// Images [end-begin, 1, H, W].
    Tensor images(int begin, int end) const {
        const std::size_t p = plane();
        std::vector<float> v(pixels.begin() + static_cast<std::ptrdiff_t>(begin * p),
                             pixels.begin() + static_cast<std::ptrdiff_t>(end * p));
        return Tensor(Shape{end - begin, 1, height, width}, std::move(v));
    }

    LabelVolume label_volume(int begin, int end) const {
        if (!labeled()) throw std::logic_error("dataset " + domain + " has no labels");
        LabelVolume v(end - begin, height, width);
        const std::size_t p = plane();
        std::copy(labels.begin() + static_cast<std::ptrdiff_t>(begin * p),
                  labels.begin() + static_cast<std::ptrdiff_t>(end * p), v.labels.begin());
        return v;
    }

    SliceSet without_labels() const {
        SliceSet s = *this;
        s.labels.clear();
        return s;
    }
};

struct DomainSplits {
    SliceSet train, val, test;
};

struct SplitRatios {
    double train = 0.7, val = 0.1, test = 0.2;
};

// ---------------------------------------------------------------------------
// Normalization

/// Clips to the 1st/99th percentile (lower nearest rank) and maps linearly to
/// [-1, 1]. A constant image maps to zeros.
inline void normalize_percentile(float* img, std::size_t n) {
    if (n == 0) return;
    std::vector<float> s(img, img + n);
    std::sort(s.begin(), s.end());
    const float lo = s[static_cast<std::size_t>(0.01 * static_cast<double>(n - 1))];
    const float hi = s[static_cast<std::size_t>(0.99 * static_cast<double>(n - 1))];
    if (!(hi - lo > 1e-8f)) {
        std::fill(img, img + n, 0.0f);
        return;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const float c = std::clamp(img[i], lo, hi);
        img[i] = std::clamp(2.0f * (c - lo) / (hi - lo) - 1.0f, -1.0f, 1.0f);
    }
}

// ---------------------------------------------------------------------------
// Geometry

inline CaseSpec sample_case(std::uint32_t id, SeededRng& rng) {
    CaseSpec c;
    c.case_id = id;
    c.slices = 8 + static_cast<int>(rng.below(5));
    c.cx = rng.uniform(28.0, 36.0);
    c.cy = rng.uniform(28.0, 36.0);
    c.drift_x = rng.uniform(-2.0, 2.0);
    c.drift_y = rng.uniform(-2.0, 2.0);
    c.axis_a = rng.uniform(8.0, 11.0);
    c.axis_b = rng.uniform(6.0, 8.0);
    c.thickness = rng.uniform(3.0, 4.5);
    c.angle = rng.uniform(0.0, std::numbers::pi);
    c.end_scale = rng.uniform(0.55, 0.75);
    // Distractor in one of the four corners, clear of the heart.
    const int corner = static_cast<int>(rng.below(4));
    c.blob_x = (corner & 1) ? rng.uniform(52.0, 57.0) : rng.uniform(7.0, 12.0);
    c.blob_y = (corner & 2) ? rng.uniform(52.0, 57.0) : rng.uniform(7.0, 12.0);
    c.blob_r = rng.uniform(2.5, 4.0);
    return c;
}

/// Ground-truth label of slice z at pixel center (x, y): 0 background,
/// 1 cavity, 2 ring. With two classes the ring is merged into class 1.
inline std::uint8_t case_label(const CaseSpec& c, int z, double x, double y, int classes) {
    const double s = c.slices > 1 ? static_cast<double>(z) / (c.slices - 1) : 0.0;
    const double scale = 1.0 + (c.end_scale - 1.0) * s;
    const double cx = c.cx + c.drift_x * s, cy = c.cy + c.drift_y * s;
    const double dx = x - cx, dy = y - cy;
    const double u = std::cos(c.angle) * dx + std::sin(c.angle) * dy;
    const double v = -std::sin(c.angle) * dx + std::cos(c.angle) * dy;
    const double a = c.axis_a * scale, b = c.axis_b * scale;
    if ((u / a) * (u / a) + (v / b) * (v / b) <= 1.0) return 1;
    const double ao = a + c.thickness, bo = b + c.thickness;
    if ((u / ao) * (u / ao) + (v / bo) * (v / bo) <= 1.0) return classes >= 3 ? 2 : 1;
    return 0;
}

inline bool in_distractor(const CaseSpec& c, double x, double y) {
    return (x - c.blob_x) * (x - c.blob_x) + (y - c.blob_y) * (y - c.blob_y) <= c.blob_r * c.blob_r;
}

// ---------------------------------------------------------------------------
// Rendering

/// Renders one slice with the domain's intensity model, then normalizes.
inline void render_slice(const DomainSpec& d, const CaseSpec& c, int z, int classes, SeededRng& rng, float* img,
                         std::uint8_t* lab) {
    const int n = kImageSize;
    // Smooth texture: three random plane waves.
    double kx[3], ky[3], ph[3];
    for (int i = 0; i < 3; ++i) {
        const double f = rng.uniform(0.1, 0.35), th = rng.uniform(0.0, 2.0 * std::numbers::pi);
        kx[i] = f * std::cos(th);
        ky[i] = f * std::sin(th);
        ph[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    const double bias_dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const std::uint8_t l = case_label(c, z, px, py, classes);
            const bool cavity = case_label(c, z, px, py, 3) == 1;
            const ClassProfile& prof =
                l == 0 ? (in_distractor(c, px, py) ? d.cavity : d.background) : (cavity ? d.cavity : d.ring);
            double tex = 0.0;
            for (int i = 0; i < 3; ++i) tex += std::sin(kx[i] * px + ky[i] * py + ph[i]);
            double v = prof.mean + prof.texture * tex / 3.0;
            const double u = (2.0 * px / n - 1.0) * std::cos(bias_dir) + (2.0 * py / n - 1.0) * std::sin(bias_dir);
            v *= 1.0 + d.bias_amplitude * u / std::numbers::sqrt2;
            v = std::pow(std::max(v, 0.0), static_cast<double>(d.gamma));
            v += d.noise_sigma * rng.normal();
            if (d.invert) v = 1.0 - v;
            const std::size_t i = static_cast<std::size_t>(y) * n + x;
            img[i] = static_cast<float>(v);
            lab[i] = l;
        }
    }
    normalize_percentile(img, static_cast<std::size_t>(n) * n);
}

inline SliceSet render_cases(const DomainSpec& d, const std::vector<CaseSpec>& specs, int classes, SeededRng& rng) {
    SliceSet s;
    s.domain = d.name;
    s.classes = classes;
    s.height = s.width = kImageSize;
    const std::size_t p = s.plane();
    for (const auto& c : specs) {
        for (int z = 0; z < c.slices; ++z) {
            s.case_ids.push_back(c.case_id);
            s.pixels.resize(s.pixels.size() + p);
            s.labels.resize(s.labels.size() + p);
            render_slice(d, c, z, classes, rng, s.pixels.data() + s.pixels.size() - p,
                         s.labels.data() + s.labels.size() - p);
        }
    }
    return s;
}

/// Case counts per split: train and val rounded, test takes the remainder.
inline std::array<int, 3> split_counts(int n_cases, const SplitRatios& r) {
    if (std::fabs(r.train + r.val + r.test - 1.0) > 1e-9 || r.train <= 0 || r.val <= 0 || r.test <= 0) {
        throw std::invalid_argument("split ratios must be positive and sum to 1");
    }
    const int tr = static_cast<int>(std::lround(r.train * n_cases));
    const int va = static_cast<int>(std::lround(r.val * n_cases));
    const int te = n_cases - tr - va;
    if (tr < 1 || va < 1 || te < 1) {
        throw std::invalid_argument("n_cases = " + std::to_string(n_cases) + " is too small for the split");
    }
    return {tr, va, te};
}

/// Deterministic train/val/test sets for one domain. Case geometry comes from
/// `geometry_seed` so two domains can share or differ in anatomy independently
/// of how they are rendered.
inline DomainSplits generate(const DomainSpec& domain, int n_cases, std::uint64_t seed, int classes = 3,
                             const SplitRatios& ratios = {}) {
    if (classes != 2 && classes != 3) throw std::invalid_argument("classes must be 2 or 3");
    const auto counts = split_counts(n_cases, ratios);
    const SeedStreams streams(seed);
    SeededRng geo = streams.stream("geometry");
    SeededRng pix = streams.stream("render/" + domain.name);
    std::vector<CaseSpec> specs;
    for (int i = 0; i < n_cases; ++i) specs.push_back(sample_case(static_cast<std::uint32_t>(i), geo));
    DomainSplits out;
    auto part = [&](int b, int e) {
        return render_cases(domain, std::vector<CaseSpec>(specs.begin() + b, specs.begin() + e), classes, pix);
    };
    out.train = part(0, counts[0]);
    out.val = part(counts[0], counts[0] + counts[1]);
    out.test = part(counts[0] + counts[1], n_cases);
    return out;
}

/// Sum of absolute parameter differences (gamma on a log scale, inversion
/// counted as 1).
inline double shift_strength(const DomainSpec& a, const DomainSpec& b) {
    auto prof = [](const ClassProfile& p, const ClassProfile& q) {
        return std::fabs(p.mean - q.mean) + std::fabs(p.texture - q.texture);
    };
    return prof(a.background, b.background) + prof(a.cavity, b.cavity) + prof(a.ring, b.ring) +
           std::fabs(a.noise_sigma - b.noise_sigma) + std::fabs(std::log(a.gamma) - std::log(b.gamma)) +
           std::fabs(a.bias_amplitude - b.bias_amplitude) + (a.invert != b.invert ? 1.0 : 0.0);
}

// ---------------------------------------------------------------------------
// Benchmarks

struct Benchmark {
    std::string name;
    DomainSpec source, target;
    int classes = 3;
    int n_cases = 20;  // per domain
};

inline DomainSpec syn_source() {
    DomainSpec d;
    d.name = "A";
    return d;
}

inline DomainSpec syn_target() {
    DomainSpec d;
    d.name = "B";
    d.gamma = 0.5f;
    d.bias_amplitude = 0.35f;
    d.noise_sigma = 0.08f;
    return d;
}

inline Benchmark find_benchmark(const std::string& name) {
    if (name == "SYN-A2B" || name == "SYN-A->B") return {"SYN-A2B", syn_source(), syn_target(), 3, 20};
    if (name == "SYN-A2B-C2") return {"SYN-A2B-C2", syn_source(), syn_target(), 2, 20};
    throw std::invalid_argument("unknown benchmark '" + name + "' (known: SYN-A2B, SYN-A2B-C2)");
}

struct BenchmarkData {
    DomainSplits source, target;
};

/// Source and target draw their anatomy from different geometry streams of the
/// same sampler.
inline BenchmarkData generate_benchmark(const Benchmark& b, std::uint64_t seed, int n_cases = 0) {
    const int n = n_cases > 0 ? n_cases : b.n_cases;
    const SeedStreams streams(seed);
    return {generate(b.source, n, streams.seed_for("source"), b.classes),
            generate(b.target, n, streams.seed_for("target"), b.classes)};
}

// ---------------------------------------------------------------------------
// Serialization

inline std::vector<std::uint8_t> dataset_save(const SliceSet& s) {
    if (!s.labeled()) throw std::invalid_argument("dataset_save: the file format stores labels");
    ByteWriter w;
    w.bytes(kDatasetMagic, 4);
    w.u16(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(s.size()));
    w.u32(static_cast<std::uint32_t>(s.classes));
    w.u32(static_cast<std::uint32_t>(s.height));
    w.u32(static_cast<std::uint32_t>(s.width));
    for (auto id : s.case_ids) w.u32(id);
    for (float v : s.pixels) w.f32(v);
    w.bytes(s.labels.data(), s.labels.size());
    return w.take();
}

inline std::size_t dataset_file_size(std::size_t n, std::size_t h, std::size_t w) { return 22 + 4 * n + 5 * n * h * w; }

inline SliceSet dataset_load(const std::vector<std::uint8_t>& bytes, const std::string& domain = "") {
    ByteReader r(bytes);
    char magic[4];
    r.bytes(magic, 4);
    if (!std::equal(magic, magic + 4, kDatasetMagic)) throw FormatError("bad dataset magic");
    const auto version = r.u16();
    if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
    SliceSet s;
    s.domain = domain;
    const std::uint32_t n = r.u32();
    s.classes = static_cast<int>(r.u32());
    s.height = static_cast<int>(r.u32());
    s.width = static_cast<int>(r.u32());
    if (s.classes < 2 || s.classes > 255 || s.height < 1 || s.width < 1 || s.height > 4096 || s.width > 4096) {
        throw FormatError("dataset header is implausible");
    }
    if (bytes.size() != dataset_file_size(n, static_cast<std::size_t>(s.height), static_cast<std::size_t>(s.width))) {
        throw FormatError("dataset size " + std::to_string(bytes.size()) + " does not match its header");
    }
    s.case_ids.resize(n);
    for (auto& id : s.case_ids) id = r.u32();
    s.pixels.resize(static_cast<std::size_t>(n) * s.plane());
    r.floats(s.pixels.data(), s.pixels.size());
    s.labels.resize(s.pixels.size());
    r.bytes(s.labels.data(), s.labels.size());
    for (auto l : s.labels) {
        if (l >= s.classes) throw FormatError("label exceeds class count");
    }
    (void)s.cases();  // contiguity check
    return s;
}

}  // namespace upl
