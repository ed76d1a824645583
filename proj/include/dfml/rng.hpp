#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>
#include <vector>

#include "common.hpp"

namespace dfml {

// Seed derivation: every consumer draws from its own stream, identified by
// (root seed, stage name, index). Streams never share state, so reordering
// one stage cannot perturb another.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t root, std::string_view stage, uint64_t index = 0) {
    return splitmix64(splitmix64(root ^ fnv1a64(stage)) + index);
}

// mt19937_64 supplies raw bits; the distributions are implemented here because
// the standard library's are not pinned across implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t u64() { return eng_(); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the spare value is kept to halve cost.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer on [lo, hi] via rejection-free Lemire reduction.
    int uniform_int(int lo, int hi) {
        require(lo <= hi, "uniform_int: empty range");
        uint64_t span = uint64_t(hi) - uint64_t(lo) + 1;
        // 64-bit multiply-shift; bias is < 2^-64 * span, irrelevant here but
        // we reject the short band anyway to keep the draw exact.
        while (true) {
            uint64_t x = eng_();
            __uint128_t m = (__uint128_t)x * span;
            uint64_t l = (uint64_t)m;
            if (l >= span) return lo + int(m >> 64);
            uint64_t thresh = (0 - span) % span;
            if (l >= thresh) return lo + int(m >> 64);
        }
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(uniform_int(0, int(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices from [0, n), order randomized.
    std::vector<int> sample_indices(int n, int k) {
        require(0 <= k && k <= n, "sample_indices: k out of range");
        std::vector<int> pool(n);
        for (int i = 0; i < n; ++i) pool[i] = i;
        for (int i = 0; i < k; ++i) {
            int j = uniform_int(i, n - 1);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace dfml
