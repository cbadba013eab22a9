#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace nslam {

// Deterministic RNG. std::mt19937_64 output is standardized, but the
// std distributions are not, so draws are derived by hand here to keep
// results bit-identical across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
        return static_cast<int>(uniform() * n);
    }

    // Index drawn from unnormalized nonnegative weights via inverse CDF.
    int categorical(const double* w, int n) {
        double total = 0;
        for (int i = 0; i < n; ++i) total += w[i];
        double u = uniform() * total;
        double acc = 0;
        for (int i = 0; i < n; ++i) {
            acc += w[i];
            if (u < acc) return i;
        }
        return n - 1;
    }

    // Standard normal via Box-Muller (both draws consumed, one returned).
    double normal() {
        double u1 = uniform(), u2 = uniform();
        if (u1 <= 0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    uint64_t raw() { return gen_(); }

    // Derive an independent stream seed (for per-episode / per-worker chains).
    uint64_t fork() { return gen_(); }

private:
    std::mt19937_64 gen_;
};

}  // namespace nslam
