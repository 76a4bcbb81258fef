#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "bsprune/tensor.hpp"

namespace bsprune {

/// Seeded RNG stream. One stream per run / per purpose keeps results
/// independent of call-site ordering elsewhere in the program.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(gen_); }
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }

    template <typename It>
    void shuffle(It first, It last) {
        std::shuffle(first, last, gen_);
    }

    /// Derive an independent child stream; used to decouple e.g. weight
    /// init from data generation under one run seed.
    Rng fork(std::uint64_t salt) {
        return Rng(gen_() ^ (salt * 0x9e3779b97f4a7c15ULL));
    }

    void fill_normal(Tensor& t, double stddev) {
        for (auto& v : t.data) v = static_cast<float>(normal() * stddev);
    }

    /// He-normal init: stddev = sqrt(2 / fan_in).
    void fill_he_normal(Tensor& t, int fan_in) {
        fill_normal(t, std::sqrt(2.0 / static_cast<double>(fan_in > 0 ? fan_in : 1)));
    }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace bsprune
