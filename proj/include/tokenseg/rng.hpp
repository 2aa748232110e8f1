#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

#include "tokenseg/tensor.hpp"

namespace tokenseg {

// Deterministic generator wrapper. Every consumer (init, shuffling, each
// augmentation site, each branch) gets its own stream derived from the run
// seed and a stream name, so adding or removing one consumer never perturbs
// the draws seen by another.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    static uint64_t derive(uint64_t seed, std::string_view stream) {
        // FNV-1a over the stream name, then one splitmix64 scramble.
        uint64_t h = 14695981039346656037ull;
        for (char c : stream) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        uint64_t z = seed + 0x9e3779b97f4a7c15ull + h;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static Rng stream(uint64_t seed, std::string_view name) {
        return Rng(derive(seed, name));
    }

    uint64_t next_u64() { return engine_(); }

    real uniform() {
        return static_cast<real>(std::uniform_real_distribution<double>(0.0, 1.0)(engine_));
    }

    real uniform(real lo, real hi) {
        return static_cast<real>(
            std::uniform_real_distribution<double>(static_cast<double>(lo),
                                                   static_cast<double>(hi))(engine_));
    }

    real normal() {
        return static_cast<real>(std::normal_distribution<double>(0.0, 1.0)(engine_));
    }

    // uniform over {lo, ..., hi} inclusive
    int uniform_int(int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(engine_);
    }

    bool bernoulli(real p) { return uniform() < p; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace tokenseg
