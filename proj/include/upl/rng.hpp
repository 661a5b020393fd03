// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace upl {

/// splitmix64 finalizer, used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Deterministic random source. Distributions are computed from raw engine
/// bits so results do not depend on the standard library's distribution code.
class SeededRng {
   public:
    explicit SeededRng(std::uint64_t seed = 0) : engine_(mix64(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // rejection sampling to avoid modulo bias
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (one value per call; no caching).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    /// Child generator whose state is a function of this generator's next draw.
    SeededRng fork() { return SeededRng(engine_()); }

   private:
    std::mt19937_64 engine_;
};

/// One root seed split into named, independent streams ("data", "dropout",
/// "transforms", "init", ...). Toggling consumers of one stream never shifts
/// another stream's sequence.
class SeedStreams {
   public:
    explicit SeedStreams(std::uint64_t root) : root_(root) {}

    std::uint64_t root() const { return root_; }

    std::uint64_t seed_for(std::string_view name) const { return mix64(root_ ^ mix64(fnv1a(name))); }

    SeededRng stream(std::string_view name) const { return SeededRng(seed_for(name)); }

   private:
    std::uint64_t root_;
};

/// Fisher-Yates shuffle driven by SeededRng.
template <class Container>
void shuffle(Container& c, SeededRng& rng) {
    for (std::size_t i = c.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(c[i - 1], c[j]);
    }
}

}  // namespace upl
