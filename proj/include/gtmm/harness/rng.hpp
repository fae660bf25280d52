#pragma once

// Reproducible random streams. Every stream is a std::mt19937_64 (an
// algorithm fixed by the C++ standard) seeded with a SplitMix64 mix of
// (run seed, FNV-1a hash of a stream label, index). Uniforms use the top 53
// bits of one draw; normals use Box-Muller with the second value cached, so
// draws are identical across standard libraries.

#include <cstdint>
#include <random>
#include <string_view>

namespace gtmm {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);
std::uint64_t stream_key(std::uint64_t run_seed, std::string_view label, std::uint64_t index);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// [0, 1)
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Unbiased integer in [0, n).
  std::int64_t uniform_index(std::int64_t n);
  double normal();

 private:
  std::mt19937_64 engine_;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

Rng seeded_rng(std::uint64_t run_seed, std::string_view label, std::uint64_t index);

}  // namespace gtmm
