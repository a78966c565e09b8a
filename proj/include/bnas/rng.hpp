// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_RNG_HPP
#define BNAS_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace bnas {

// std::*_distribution output is implementation-defined, so draws are derived
// from raw mt19937_64 words to keep runs identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 42) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    template <class It>
    void shuffle(It first, It last) {
        for (auto n = last - first; n > 1; --n) {
            auto j = static_cast<decltype(n)>(below(static_cast<std::uint64_t>(n)));
            std::swap(first[n - 1], first[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Derives an independent stream seed from a base seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed ^ (tag * 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace bnas

#endif // BNAS_RNG_HPP
