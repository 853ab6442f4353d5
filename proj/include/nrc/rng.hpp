#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace nrc {

// splitmix64; used to derive independent sub-seeds from one master seed so
// that data generation, parameter init and batch shuffling can be varied
// separately.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace seed_stream {
constexpr std::uint64_t data = 0;
constexpr std::uint64_t init = 1;
constexpr std::uint64_t shuffle = 2;
}  // namespace seed_stream

using Rng = std::mt19937_64;

inline double uniform_unit(Rng& rng) {
    // 53-bit mantissa in [0, 1)
    return (rng() >> 11) * 0x1.0p-53;
}

inline double uniform_in(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform_unit(rng);
}

// Box-Muller on raw engine output. std::normal_distribution is not pinned by
// the standard, so golden values frozen from it would not survive a stdlib
// change.
inline double gaussian(Rng& rng, double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform_unit(rng);
    while (u1 <= 0.0) u1 = uniform_unit(rng);
    const double u2 = uniform_unit(rng);
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace nrc
