#pragma once

// Counter-based named random streams.
//
// Every random draw in the project is addressed as (root seed, stream name, index).
// The stream key is a hash of the name, and each (key, index) pair seeds a fresh
// std::mt19937_64, so adding a new stream or a new consumer never shifts the values
// any other consumer sees. Distributions are computed by hand because the standard
// library distributions are implementation-defined.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace ivcxr {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

/// A sequential generator positioned at one (seed, stream, index) address.
class StreamRng {
public:
    StreamRng(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0)
        : engine_(splitmix64(splitmix64(seed ^ fnv1a(stream)) + splitmix64(index + 0x632BE59BD9B4E019ull))) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // rejection sampling for exact uniformity
        const std::uint64_t limit = ~0ull - (~0ull % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (one value per call, second one discarded).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace ivcxr
