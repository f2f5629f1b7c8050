#pragma once

// Deterministic random source (xoshiro256++ with splitmix64 seeding).
// The generator is fully specified here so streams are bit-identical
// across platforms and compilers.

#include <cstdint>
#include <cmath>

#include "flowcal/tensor.hpp"

namespace flowcal {

namespace detail {
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}
inline uint64_t rotl64(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
} // namespace detail

class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = detail::splitmix64(sm);
    }

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() {
        const uint64_t result = detail::rotl64(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = detail::rotl64(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; draws come in cached pairs.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    Tensor normal_tensor(Shape shape) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal();
        return t;
    }

    // Unbiased integer in [0, n) by rejection.
    uint64_t below(uint64_t n) {
        const uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= lim);
        return v % n;
    }

    // Fisher-Yates permutation of {0, ..., n-1}.
    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        for (int64_t i = n - 1; i > 0; --i)
            std::swap(p[static_cast<size_t>(i)],
                      p[static_cast<size_t>(below(static_cast<uint64_t>(i + 1)))]);
        return p;
    }

    // Independent child stream derived from the base seed, not from the
    // current state: fork(i) is reproducible regardless of draws made.
    Rng fork(uint64_t stream) const {
        uint64_t sm = seed_ ^ (0x9E3779B97F4A7C15ULL * (stream + 0x632BE59BD9B4E019ULL));
        return Rng(detail::splitmix64(sm));
    }

private:
    uint64_t seed_ = 0;
    uint64_t s_[4] = {};
    double cached_ = 0.0;
    bool have_cached_ = false;
};

} // namespace flowcal
