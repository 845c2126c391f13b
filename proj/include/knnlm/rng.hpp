#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace knnlm {

/// Seeded RNG with explicitly pinned derivations so that every stochastic
/// stage is reproducible from its seed alone. std::mt19937_64 output is
/// portable; the distribution code below avoids std::*_distribution, whose
/// results vary across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    /// Unbiased integer in [0, n) via rejection sampling.
    uint64_t below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    /// Standard normal, Box-Muller with cached spare.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices drawn from [0, n), in draw order.
    std::vector<uint64_t> sample_distinct(uint64_t n, uint64_t k) {
        if (k > n) throw std::invalid_argument("Rng::sample_distinct: k > n");
        // Partial Fisher-Yates over a lazily materialized index map.
        std::vector<uint64_t> picked;
        picked.reserve(k);
        std::unordered_map<uint64_t, uint64_t> remap;
        for (uint64_t i = 0; i < k; ++i) {
            const uint64_t j = i + below(n - i);
            uint64_t pick = j;
            if (auto it = remap.find(j); it != remap.end()) pick = it->second;
            uint64_t top = i;
            if (auto it = remap.find(i); it != remap.end()) top = it->second;
            remap[j] = top;
            picked.push_back(pick);
        }
        return picked;
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace knnlm
