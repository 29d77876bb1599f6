// SPDX-License-Identifier: Apache-2.0
//
// Seeded random streams. Normal variates use an explicit Box-Muller so
// sequences are bit-identical across platforms and standard libraries.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "condflow/tensor.hpp"

namespace condflow {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(splitmix64(seed)), seed_base_(splitmix64(seed)) {}

  // Derived stream; decorrelates phases/workers from one base seed.
  Rng fork(std::uint64_t tag) const {
    return Rng(seed_base_ ^ splitmix64(0x6c62272e07bb0142ULL + tag));
  }

  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  std::uint64_t integer(std::uint64_t n) {
    // Rejection-free of modulo bias.
    const std::uint64_t limit = n * (UINT64_MAX / n);
    std::uint64_t v = gen_();
    while (v >= limit) v = gen_();
    return v % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& xs) {
    for (std::size_t i = xs.size(); i > 1; --i)
      std::swap(xs[i - 1], xs[integer(i)]);
  }

  Tensor normal_tensor(Shape s) {
    Tensor t(std::move(s));
    for (double& v : t.data) v = normal();
    return t;
  }

  Tensor uniform_tensor(Shape s, double a, double b) {
    Tensor t(std::move(s));
    for (double& v : t.data) v = uniform(a, b);
    return t;
  }

 private:
  std::mt19937_64 gen_;
  std::uint64_t seed_base_ = 0;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

} // namespace condflow
