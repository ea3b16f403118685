#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>

namespace specgt {

/// Portable random stream.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. Distributions are implemented here rather than taken from
/// <random>, because the standard leaves their algorithms unspecified and
/// they differ between library vendors.
///
/// Stream splitting: `derive_seed(seed, tag)` mixes a 64-bit FNV-1a hash of
/// the tag into the parent seed with SplitMix64. Child streams are named
/// ("scene/3", "train/dropout", ...) so adding a stream never perturbs the
/// others.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer on [0, n). Rejection sampling, no modulo bias.
  std::size_t uniform_index(std::size_t n);

  /// Standard normal by Box-Muller (one draw per call).
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  Rng child(std::string_view tag) { return Rng(derive_seed(next_u64(), tag)); }

  static std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace specgt
