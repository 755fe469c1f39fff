#ifndef DIFFUERASER_RNG_HPP
#define DIFFUERASER_RNG_HPP

#include <cmath>
#include <cstdint>

#include "tensor.hpp"

namespace diffueraser {

// splitmix64 + Box-Muller. Self-contained so seeded streams are reproducible
// independent of the standard library's distribution implementations.
struct Rng {
    uint64_t state;
    bool has_spare = false;
    double spare = 0.0;

    explicit Rng(uint64_t seed) : state(seed) {}

    uint64_t next_u64() {
        state += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
    }

    double gaussian() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare = r * std::sin(a);
        has_spare = true;
        return r * std::cos(a);
    }

    Tensor gaussian_tensor(std::vector<int64_t> shape, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = gaussian() * stddev;
        return t;
    }

    Tensor uniform_tensor(std::vector<int64_t> shape, double lo = 0.0, double hi = 1.0) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
        return t;
    }
};

}  // namespace diffueraser

#endif
