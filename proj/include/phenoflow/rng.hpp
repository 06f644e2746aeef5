#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "phenoflow/errors.hpp"

namespace phenoflow {

/// Deterministic random stream. All randomness in the library flows through
/// this class so that (seed, draw counter) fully determines every value,
/// independent of platform libm / libstdc++ distribution internals.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (one cached value per pair).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform integer in [0, n).
    std::int64_t uniform_int(std::int64_t n) {
        if (n <= 0) throw ContractError("uniform_int: n must be positive");
        // Rejection sampling to avoid modulo bias.
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return static_cast<std::int64_t>(x % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Derive an independent child stream. Consumes one draw from the parent,
    /// so fork order matters for reproducibility.
    Rng fork() { return Rng(splitmix64(engine_() ^ 0x9e3779b97f4a7c15ull)); }

    /// Stable named substream of `seed` (does not consume parent state).
    static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
        return Rng(splitmix64(seed + 0x9e3779b97f4a7c15ull * (stream_id + 1)));
    }

    static std::uint64_t splitmix64(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

  private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace phenoflow
