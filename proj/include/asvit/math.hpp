#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <type_traits>

namespace asvit::math {

// Branch-free single-precision exp and erf so elementwise loops vectorise. Doubles go to libm,
// which keeps the double-precision gradient checks exact to the last bits.

/// exp for floats: Cody-Waite reduction to [-ln2/2, ln2/2] and a degree-6 polynomial (a few ulp); exp(x) underflows to 0 below -86.5.
inline float exp_f32(float x) {
  constexpr float kHi = 88.72f, kLo = -86.5f;
  const bool under = x < kLo, over = x > kHi;
  x = x < kLo ? kLo : x;
  x = x > kHi ? kHi : x;
  // Round to nearest by adding and removing 1.5 * 2^23; exact here and, unlike floor, vectorisable.
  const float n = (x * 1.44269504088896341f + 12582912.0f) - 12582912.0f;
  float r = x - n * 0.693359375f;
  r -= n * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  // n lies in [-125, 128]; scaling by 2^(n-1) and then 2 keeps the exponent field normal.
  const auto bits = static_cast<std::int32_t>(n + 126.0f) << 23;
  float y = p * std::bit_cast<float>(bits) * 2.0f;
  y = under ? 0.0f : y;
  return over ? HUGE_VALF : y;
}

/// erf for floats (absolute error about 2e-7): odd Taylor series below |x| = 1, where the
/// rational form in t = 1 / (1 + p|x|) would cancel, the rational form above.
inline float erf_f32(float x) {
  const float ax = x < 0.0f ? -x : x;
  const float t = 1.0f / (1.0f + 0.3275911f * ax);
  float y = 1.061405429f;
  y = y * t - 1.453152027f;
  y = y * t + 1.421413741f;
  y = y * t - 0.284496736f;
  y = y * t + 0.254829592f;
  y = 1.0f - y * t * exp_f32(-ax * ax);
  y = x < 0.0f ? -y : y;
  const float x2 = x * x;
  float s = 1.0f / 76204800.0f;
  s = s * x2 - 1.0f / 6894720.0f;
  s = s * x2 + 1.0f / 685440.0f;
  s = s * x2 - 1.0f / 75600.0f;
  s = s * x2 + 1.0f / 9360.0f;
  s = s * x2 - 1.0f / 1320.0f;
  s = s * x2 + 1.0f / 216.0f;
  s = s * x2 - 1.0f / 42.0f;
  s = s * x2 + 1.0f / 10.0f;
  s = s * x2 - 1.0f / 3.0f;
  s = (s * x2 + 1.0f) * x * 1.1283791671f;
  return ax < 1.0f ? s : y;
}

template <class T>
inline T exp(T x) {
  if constexpr (std::is_same_v<T, float>)
    return exp_f32(x);
  else
    return std::exp(x);
}

template <class T>
inline T erf(T x) {
  if constexpr (std::is_same_v<T, float>)
    return erf_f32(x);
  else
    return std::erf(x);
}

}  // namespace asvit::math
