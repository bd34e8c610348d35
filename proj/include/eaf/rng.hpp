#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace eaf {

// Deterministic xoshiro256** generator seeded through splitmix64.
// Unlike the <random> distributions, every draw here is fully specified,
// so identical seeds give identical streams on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    // Uniform in [0, 1), 53-bit resolution.
    double uniform();

    // Uniform in [lo, hi).
    double uniform(double lo, double hi);

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_index(std::uint64_t n);

    // Standard normal via Box-Muller (pairs are cached).
    double normal();

    double normal(double mean, double stddev);

    // Independent child stream; the parent stream is not advanced.
    Rng fork(std::uint64_t stream_tag) const;

private:
    std::uint64_t s_[4];
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

// FNV-1a 64-bit hash, used for stable config/spec fingerprints.
std::uint64_t fnv1a64(std::string_view bytes);

// Hash rendered as 16 hex digits.
std::string hash_hex(std::uint64_t h);

}  // namespace eaf
