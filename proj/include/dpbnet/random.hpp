#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "dpbnet/tensor.hpp"

namespace dpbn {

/// Mixes a base seed with stream identifiers (sample index, iteration, ...)
/// into an independent 64-bit seed.
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> stream);

/// Seeded generator whose derived draws are bit-reproducible across
/// standard libraries: the engine output is fixed by the standard, the
/// conversions to real values are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  /// Standard normal via Box-Muller.
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0;
};

Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi);

}  // namespace dpbn
