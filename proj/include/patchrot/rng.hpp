#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace patchrot {

/// mt19937_64 engine with portable distributions (the std:: distributions are
/// implementation-defined) and keyed substreams. `split(keys...)` depends only
/// on the root seed and the keys, never on how many draws were made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [lo, hi] (inclusive), unbiased by rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01();

  /// Standard normal via Box-Muller (no cached second value).
  double normal();

  Rng split(std::initializer_list<std::uint64_t> keys) const;

  /// SplitMix64 finalizer.
  static std::uint64_t mix(std::uint64_t x) noexcept;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace patchrot
