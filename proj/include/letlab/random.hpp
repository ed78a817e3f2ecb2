// SPDX-License-Identifier: Apache-2.0
//
// Portable seeded randomness. Distributions are implemented here rather than
// through <random>'s distribution classes, whose algorithms vary between
// standard libraries; the engine itself is std::mt19937_64.

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace letlab {

std::uint64_t splitmix64(std::uint64_t x);

/// Independent sub-stream seed for `name` ("init", "data", "shuffle", ...).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double normal();
  /// Normal(0, stddev) resampled until |x| <= 2 * stddev.
  double truncated_normal(double stddev);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace letlab
