#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

namespace maskmamba {

// Cephes-style single-precision exp: ~1e-7 relative error, branch-free body,
// auto-vectorizes under -fno-math-errno -fno-trapping-math. Used in the f32
// hot paths (softmax rows, scan discretization); f64 code calls std::exp.
inline float fast_expf(float x) {
  constexpr float kLog2e = 1.44269504088896341f;
  constexpr float kC1 = 0.693359375f;
  constexpr float kC2 = -2.12194440e-4f;
  x = x < -87.3365f ? -87.3365f : (x > 88.3762f ? 88.3762f : x);
  float n = std::nearbyint(x * kLog2e);
  float r = x - n * kC1 - n * kC2;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  return p * std::bit_cast<float>((static_cast<std::int32_t>(n) + 127) << 23);
}

template <class T>
inline T fast_exp(T x) {
  if constexpr (sizeof(T) == sizeof(float)) {
    return fast_expf(x);
  } else {
    return std::exp(x);
  }
}

}  // namespace maskmamba
