#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "tsfda/tensor.hpp"

namespace tsfda {

/// Deterministic RNG. The engine (mt19937_64) is fully specified by the
/// standard; the distributions are implemented here because the standard
/// library's are not, and bitwise replay across toolchains is part of the
/// contract.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (two fresh uniforms per call, no cache).
  double normal();

  /// Uniform integer in [0, n).
  Index below(Index n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (Index i = static_cast<Index>(v.size()) - 1; i > 0; --i) {
      const Index j = below(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// Derives a well-separated child seed from (seed, tag); used to give every
/// phase (init, batching, masking, ...) its own stream.
std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag);

}  // namespace tsfda
