// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace moelab {

/// Counter-based generator: the SplitMix64 finalizer applied to a counter
/// keyed by (seed, stream). The n-th draw from a given (seed, stream) is a
/// pure function of (seed, stream, n), so replaying a stream is exact and
/// independent streams never interact.
///
/// Normal deviates use the Acklam inverse-CDF approximation (relative error
/// below 1.2e-9), one uniform draw per deviate.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  double uniform();     ///< [0, 1)
  double normal();      ///< standard normal
  double rademacher();  ///< +1 or -1 with equal probability

  void fill_uniform(std::span<double> out, double lo, double hi);
  void fill_normal(std::span<double> out);

  /// Same seed, derived stream. Distinct n give non-overlapping streams.
  Rng substream(std::uint64_t n) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t draw_count() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Inverse of the standard normal CDF for p in (0, 1).
double inverse_normal_cdf(double p);

/// Standard normal CDF.
double normal_cdf_value(double x);

/// FNV-1a, used for deriving named substreams and config hashes.
std::uint64_t fnv1a(std::string_view s);

}  // namespace moelab
