#pragma once

// Branch-free float exp/erf that the compiler can vectorise. exp follows the
// Cephes single-precision scheme (about 1 ulp); erf is Abramowitz & Stegun
// 7.1.26 (absolute error below 1.5e-7).

#include <bit>
#include <cmath>
#include <cstdint>

namespace dlvit::fastmath {

inline float exp(float x) {
  // plain selects: std::fmin/fmax become libm calls and block vectorisation
  x = x < -87.3f ? -87.3f : x;
  x = x > 88.7f ? 88.7f : x;
  const float n = std::floor(x * 1.44269504088896341f + 0.5f);
  float r = x - n * 0.693359375f;
  r = r + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

inline float erf(float x) {
  const float ax = std::fabs(x);
  const float t = 1.0f / (1.0f + 0.3275911f * ax);
  float poly = 1.061405429f;
  poly = poly * t - 1.453152027f;
  poly = poly * t + 1.421413741f;
  poly = poly * t - 0.284496736f;
  poly = poly * t + 0.254829592f;
  const float y = 1.0f - poly * t * exp(-ax * ax);
  return std::copysign(y, x);
}

}  // namespace dlvit::fastmath
