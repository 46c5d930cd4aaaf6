#pragma once

// Counter-based pseudo-random numbers. Every draw is a pure function of
// (seed, stream, counter), so generation order and worker count never affect
// results, and only IEEE basic operations (+ - * / sqrt) touch floating point,
// which keeps the output bit-identical across platforms.

#include <bit>
#include <cmath>
#include <cstdint>

namespace tensor_ties::rng {

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

/// The splitmix64 finaliser of Steele, Lea and Flood.
inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += kGolden;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// draw(seed, stream, counter) = splitmix64(key + counter * golden),
/// key = splitmix64(seed ^ splitmix64(stream)).
inline constexpr std::uint64_t draw(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) noexcept
{
    const std::uint64_t key = splitmix64(seed ^ splitmix64(stream));
    return splitmix64(key + counter * kGolden);
}

/// Uniform double in [0, 1) from the top 53 bits.
inline constexpr double to_unit(std::uint64_t x) noexcept
{
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

/// Natural log from basic arithmetic only: x = m * 2^e with m in [sqrt(1/2), sqrt(2)),
/// log m = 2 atanh((m - 1) / (m + 1)) summed as a series. Accurate to a few ulp.
inline double portable_log(double x) noexcept
{
    if (!(x > 0.0)) return x == 0.0 ? -INFINITY : NAN;
    int e = 0;
    double m = std::frexp(x, &e); // exact
    if (m < 0.70710678118654752440) {
        m *= 2.0;
        --e;
    }
    const double z = (m - 1.0) / (m + 1.0);
    const double z2 = z * z;
    // |z| <= 0.1716, so 16 terms leave a truncation error below 1e-24.
    double term = z, sum = 0.0;
    for (int k = 1; k <= 31; k += 2) {
        sum += term / k;
        term *= z2;
    }
    return 2.0 * sum + e * 0.69314718055994530942;
}

/// Standard normal via the Marsaglia polar method. Rejected pairs consume
/// further counters of the same (seed, stream, index) sequence.
inline double normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) noexcept
{
    for (std::uint64_t attempt = 0;; ++attempt) {
        const std::uint64_t base = (index << 8) + 2 * attempt;
        const double u = 2.0 * to_unit(draw(seed, stream, base)) - 1.0;
        const double v = 2.0 * to_unit(draw(seed, stream, base + 1)) - 1.0;
        const double s = u * u + v * v;
        if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * portable_log(s) / s);
        if (attempt == 127) return 0.0; // (1 - pi/4)^128: unreachable in practice
    }
}

} // namespace tensor_ties::rng
