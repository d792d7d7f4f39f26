#pragma once

#include <cstdint>
#include <random>

#include "stemdiff/core/tensor.hpp"

namespace stemdiff {

/// Seeded generator used everywhere randomness enters. Streams are derived by
/// hashing (seed, stream, index) so that any sub-task is reproducible alone.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(mix(seed)) {}

  static std::uint64_t mix(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }
  static Rng derive(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    return Rng(mix(mix(seed) ^ mix(stream * 0x632be59bd9b4e019ULL + index)));
  }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void fill_normal(Tensor<T>& t) {
    for (auto& v : t.values()) v = static_cast<T>(normal());
  }
  template <typename T>
  Tensor<T> normal_tensor(const Shape& shape) {
    Tensor<T> t(shape);
    fill_normal(t);
    return t;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace stemdiff
