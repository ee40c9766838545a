#ifndef COLORIZER_CORE_RNG_HPP
#define COLORIZER_CORE_RNG_HPP

#include "colorizer/core/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>

namespace colorizer {

/// Seeded generator with a self-contained normal transform so that streams
/// are reproducible across standard libraries (std::normal_distribution is
/// implementation-defined; Box-Muller over mt19937_64 is not).
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed), base_seed_(seed) {}

    uint64_t next_u64() { return gen_(); }

    /// Uniform in [0,1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] via rejection-free modulo (bias negligible
    /// for the ranges used here, but keep it exact anyway).
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return lo + static_cast<int64_t>(x % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <class S>
    void fill_normal(Tensor<S>& t, double stddev = 1.0, double mean = 0.0) {
        for (Eigen::Index i = 0; i < t.size(); ++i)
            t[i] = static_cast<S>(mean + stddev * normal());
    }

    template <class S>
    Tensor<S> normal_tensor(std::vector<Eigen::Index> shape, double stddev = 1.0) {
        Tensor<S> t(std::move(shape));
        fill_normal(t, stddev);
        return t;
    }

    /// Fisher-Yates permutation of {0..n-1}.
    std::vector<int> permutation(int n) {
        std::vector<int> p(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        for (int i = n - 1; i > 0; --i) {
            int j = static_cast<int>(uniform_int(0, i));
            std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
        }
        return p;
    }

    /// Derive an independent child stream (for per-image seeds etc.).
    Rng child(uint64_t stream) const {
        uint64_t s = seed_mix(base_seed_, stream);
        return Rng(s);
    }

    static uint64_t seed_mix(uint64_t a, uint64_t b) {
        // splitmix64 over the pair
        uint64_t x = a + 0x9E3779B97F4A7C15ull * (b + 1);
        x ^= x >> 30;
        x *= 0xBF58476D1CE4E5B9ull;
        x ^= x >> 27;
        x *= 0x94D049BB133111EBull;
        x ^= x >> 31;
        return x;
    }

private:
    std::mt19937_64 gen_;
    uint64_t base_seed_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// FNV-1a over raw bytes; used for hash-bucketed tokens and weight checksums.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace colorizer

#endif
