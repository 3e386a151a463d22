#pragma once

// SplitMix64 with a fixed stream-splitting rule. Everything the harness
// generates is a pure function of (seed, stream label), so a given seed yields
// the same instance regardless of the order in which matrices are drawn.
//
//   stream state = mix(seed ^ mix(label + 1))
//   next()       = mix(state += 0x9E3779B97F4A7C15)
//   uniform()    = (next() >> 11) * 2^-53          in [0, 1)
//   normal()     = Box-Muller on (1 - uniform(), uniform()), cosine branch only

#include <cmath>
#include <cstdint>
#include <numbers>

#include "dlnet/linalg.hpp"

namespace dlnet {

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t state) : state_(state) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Independent stream `label` of `seed`.
  static SplitMix64 stream(std::uint64_t seed, std::uint64_t label) {
    return SplitMix64(mix(seed ^ mix(label + 1)));
  }

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [lo, hi].
  Index uniform_int(Index lo, Index hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<Index>(next() % span);
  }

  Matrix normal_matrix(Index rows, Index cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (Index c = 0; c < cols; ++c) {
      for (Index r = 0; r < rows; ++r) m(r, c) = scale * normal();
    }
    return m;
  }

  Vector normal_vector(Index n, double scale = 1.0) {
    Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = scale * normal();
    return v;
  }

 private:
  std::uint64_t state_;
};

}  // namespace dlnet
