// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace merid {

// Deterministic generator used everywhere seeds matter. Distributions are
// implemented by hand (not <random> adapters) so the produced streams are
// identical across standard-library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        state_ = seed;
        // splitmix-style warmup; avoids the all-zeros fixed point
        next_u64();
        next_u64();
        has_spare_ = false;
    }

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Poisson sample; Knuth for small lambda, normal approximation above.
    long poisson(double lambda) {
        if (lambda <= 0.0)
            return 0;
        if (lambda < 30.0) {
            double limit = std::exp(-lambda);
            double prod = uniform();
            long n = 0;
            while (prod > limit) {
                prod *= uniform();
                ++n;
            }
            return n;
        }
        double n = std::floor(lambda + std::sqrt(lambda) * normal() + 0.5);
        return n < 0.0 ? 0 : static_cast<long>(n);
    }

private:
    std::uint64_t state_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace merid
