// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "magical/tensor.hpp"

namespace magical {

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal(double stddev = 1.0) { return std::normal_distribution<double>(0.0, stddev)(engine_); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

    template <class It>
    void shuffle(It first, It last) {
        std::shuffle(first, last, engine_);
    }

    Tensor gaussian(Shape shape, double stddev) {
        auto t = Tensor::zeros(std::move(shape));
        for (auto& v : t.data()) v = normal(stddev);
        return t;
    }

    Tensor uniform_tensor(Shape shape, double lo, double hi) {
        auto t = Tensor::zeros(std::move(shape));
        for (auto& v : t.data()) v = uniform(lo, hi);
        return t;
    }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void restore(const std::string& state) {
        std::istringstream is(state);
        is >> engine_;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

/// Derives an independent stream seed from a base seed and a salt.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace magical
