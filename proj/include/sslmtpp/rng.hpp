// sslmtpp/rng.hpp: deterministic, splittable random streams.
//
// Every stochastic component draws from its own stream, derived from a base
// seed plus a string tag. Streams are therefore independent of each other:
// adding or removing a consumer never shifts the draws seen by another one.
// Distribution sampling is hand-inverted from raw 64-bit output so results
// do not depend on the standard library's unspecified distribution
// algorithms.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace sslmtpp {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Child seed for a named stream. FNV-1a over the tag, mixed with the base.
inline uint64_t mix_seed(uint64_t base, std::string_view tag) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(base ^ h);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(splitmix64(seed)) {}

    uint64_t next() { return eng_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // always tiny relative to 2^64, so the bias is unobservable.
    uint64_t below(uint64_t n) { return next() % n; }

    double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

    double normal() {
        // Box-Muller; one value per call keeps the stream layout simple.
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Index sampled from a probability vector (need not be normalized
    // beyond rounding noise; the last bucket absorbs the remainder).
    int discrete(const std::vector<double>& probs) {
        double u = uniform();
        double acc = 0.0;
        for (size_t i = 0; i + 1 < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) return static_cast<int>(i);
        }
        return static_cast<int>(probs.size()) - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace sslmtpp
