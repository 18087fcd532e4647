#pragma once

#include <cstdint>
#include <random>

namespace rils {

using Rng = std::mt19937_64;

// splitmix64, the standard seed mixer. Used to derive independent streams
// from (seed, stream-tag) pairs so a run can be resumed at any step without
// replaying the RNG history.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t tag) {
    return splitmix64(splitmix64(seed) ^ splitmix64(tag));
}

inline Rng make_rng(uint64_t seed, uint64_t tag = 0) { return Rng(derive_seed(seed, tag)); }

// Truncated normal in [-2*std, 2*std], the usual transformer init.
template <typename T>
T trunc_normal(Rng& rng, T stddev) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (;;) {
        const double v = dist(rng);
        if (std::abs(v) <= 2.0 * static_cast<double>(stddev)) return static_cast<T>(v);
    }
}

}  // namespace rils
