#pragma once

#include <cmath>
#include <cstdint>

#include "capsgan/tensor.hpp"

namespace capsgan {

// Counter-based splitmix64 stream.
//
// Exact contract, so that draws are reproducible from the seed alone:
//   state <- state + 0x9E3779B97F4A7C15
//   z <- state; z <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z <- (z ^ (z >> 27)) * 0x94D049BB133111EB
//   output <- z ^ (z >> 31)
// uniform in [0,1): (output >> 11) * 2^-53
// normal: Box-Muller on consecutive uniforms (u1, u2), u1 resampled while 0;
//   r = sqrt(-2 ln u1), returns r*cos(2 pi u2) then caches r*sin(2 pi u2).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_uniform();
    while (u1 <= 0.0) u1 = next_uniform();
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * next_normal(); }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Stable combiner for deriving per-purpose seeds from a root seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Tensor rng_normal(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.next_normal();
  return t;
}

inline Tensor rng_uniform(Shape shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace capsgan
