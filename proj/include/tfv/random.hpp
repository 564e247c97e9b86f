#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace tfv {

using Rng = std::mt19937_64;

// splitmix64 finalizer; mixes a parent seed with stream/item indices so that
// per-item streams do not depend on generation order.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ a) ^ (b * 0xd1342543de82ef95ULL));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
    return Rng(mix_seed(seed, a, b));
}

inline void fill_normal(std::span<double> out, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (double& v : out) v = n(rng);
}

inline double uniform01(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

} // namespace tfv
