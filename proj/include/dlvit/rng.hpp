#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>

namespace dlvit {

// SplitMix64. Satisfies UniformRandomBitGenerator so it can drive <random>
// distributions and std::shuffle.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : (*this)() % n; }

  double normal() {
    // Box-Muller; the second variate is dropped to keep the state trivially copyable.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Normal(0, std) resampled until it falls inside [-2 std, 2 std].
  double truncated_normal(double std) {
    for (;;) {
      const double z = normal();
      if (std::fabs(z) <= 2.0) return z * std;
    }
  }

  // Derive an independent stream, e.g. one per worker or per epoch.
  SplitMix64 fork(std::uint64_t salt) { return SplitMix64((*this)() ^ (salt * 0xD1B54A32D192ED03ULL)); }

 private:
  std::uint64_t state_;
};

}  // namespace dlvit
