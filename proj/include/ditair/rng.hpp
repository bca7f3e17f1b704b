#pragma once

#include <cmath>
#include <cstdint>

namespace ditair {

// =============================================================================
// Counter-based random numbers
// =============================================================================
//
// Each draw is a stateless hash of (seed, stream, counter). Advancing the
// generator only bumps the counter, and split(k) derives a child stream id
// from (parent stream, k), so child streams never share a (stream, counter)
// input with each other or with the parent. Draw order therefore cannot
// change results the way it can for a shared sequential generator, and any
// draw can be reproduced from its coordinates alone.

namespace detail {

// Finalizer with full avalanche; the classic splitmix64 constant set.
inline uint64_t mix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline uint64_t hash3(uint64_t a, uint64_t b, uint64_t c) {
    uint64_t h = mix64(a);
    h = mix64(h ^ b);
    h = mix64(h ^ c);
    return h;
}

}  // namespace detail

class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) : seed_(seed), stream_(stream) {}

    uint64_t next_u64() { return detail::hash3(seed_, stream_, counter_++); }

    // Uniform in [0, 1), 53 mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller. The pair is drawn together and the
    // second value is cached, so consecutive calls consume draws in pairs.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        // u1 in (0, 1] so the log is finite.
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // always tiny relative to 2^64 so the bias is far below statistical use.
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    // Child generator k. Children of distinct k (and the parent itself)
    // operate on distinct stream ids, so their draw sets are disjoint.
    Rng split(uint64_t k) const {
        return Rng(seed_, detail::hash3(seed_ ^ 0xA5A5A5A5A5A5A5A5ull, stream_, k));
    }

    template <typename T>
    void fill_normal(T* p, int64_t n, double scale = 1.0) {
        for (int64_t i = 0; i < n; ++i) p[i] = static_cast<T>(scale * normal());
    }

    template <typename T>
    void fill_uniform(T* p, int64_t n, double lo, double hi) {
        for (int64_t i = 0; i < n; ++i) p[i] = static_cast<T>(lo + (hi - lo) * uniform());
    }

    uint64_t seed() const { return seed_; }
    uint64_t stream() const { return stream_; }
    uint64_t counter() const { return counter_; }

private:
    uint64_t seed_;
    uint64_t stream_;
    uint64_t counter_ = 0;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace ditair
