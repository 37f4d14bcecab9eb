#pragma once

#include <bit>
#include <cstdint>

namespace aotp {

// IEEE 754 binary16 conversion with round-to-nearest-even.
inline std::uint16_t float_to_half(float value) noexcept {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::uint32_t mag = x & 0x7FFFFFFFu;

  if (mag >= 0x7F800000u) {
    // Inf stays inf, NaN keeps a quiet payload bit.
    return static_cast<std::uint16_t>(sign | 0x7C00u | (mag > 0x7F800000u ? 0x0200u | ((mag >> 13) & 0x03FFu) : 0u));
  }
  if (mag >= 0x47800000u) return static_cast<std::uint16_t>(sign | 0x7C00u);

  if (mag < 0x38800000u) {
    // Result is subnormal (or zero) in half precision.
    if (mag < 0x33000000u) return static_cast<std::uint16_t>(sign);
    const std::uint32_t exponent = mag >> 23;
    const std::uint32_t mantissa = (mag & 0x007FFFFFu) | 0x00800000u;
    const std::uint32_t shift = 126u - exponent;
    std::uint32_t m = mantissa >> shift;
    const std::uint32_t rem = mantissa & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1u);
    if (rem > halfway || (rem == halfway && (m & 1u))) ++m;
    return static_cast<std::uint16_t>(sign | m);
  }

  std::uint32_t v = (mag >> 13) - (112u << 10);
  const std::uint32_t rem = mag & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (v & 1u))) ++v;
  return static_cast<std::uint16_t>(sign | v);
}

// Same rounding applied directly to a double, so there is no intermediate
// rounding to float.
inline std::uint16_t double_to_half(double value) noexcept {
  const std::uint64_t x = std::bit_cast<std::uint64_t>(value);
  const auto sign = static_cast<std::uint32_t>((x >> 48) & 0x8000u);
  const std::uint64_t mag = x & 0x7FFFFFFFFFFFFFFFull;
  if (mag >= 0x7FF0000000000000ull) {
    const bool nan = mag > 0x7FF0000000000000ull;
    return static_cast<std::uint16_t>(sign | 0x7C00u | (nan ? 0x0200u | static_cast<std::uint32_t>((mag >> 42) & 0x03FFu) : 0u));
  }
  const int exponent = static_cast<int>(mag >> 52) - 1023;
  if (exponent >= 16) return static_cast<std::uint16_t>(sign | 0x7C00u);
  const std::uint64_t fraction = mag & 0x000FFFFFFFFFFFFFull;
  if (exponent >= -14) {
    std::uint32_t v = (static_cast<std::uint32_t>(exponent + 15) << 10) | static_cast<std::uint32_t>(fraction >> 42);
    const std::uint64_t rem = fraction & ((1ull << 42) - 1);
    const std::uint64_t halfway = 1ull << 41;
    if (rem > halfway || (rem == halfway && (v & 1u))) ++v;
    return static_cast<std::uint16_t>(sign | v);
  }
  if (exponent < -25) return static_cast<std::uint16_t>(sign);
  // Subnormal result: count units of 2^-24.
  const std::uint64_t m = fraction | (1ull << 52);
  const auto shift = static_cast<unsigned>(28 - exponent);
  std::uint64_t q = m >> shift;
  const std::uint64_t rem = m & ((1ull << shift) - 1);
  const std::uint64_t halfway = 1ull << (shift - 1);
  if (rem > halfway || (rem == halfway && (q & 1u))) ++q;
  return static_cast<std::uint16_t>(sign | static_cast<std::uint32_t>(q));
}

template <typename T>
std::uint16_t to_half(T value) noexcept {
  if constexpr (sizeof(T) > sizeof(float)) {
    return double_to_half(static_cast<double>(value));
  } else {
    return float_to_half(static_cast<float>(value));
  }
}

inline float half_to_float(std::uint16_t h) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exponent = (h >> 10) & 0x1Fu;
  const std::uint32_t mantissa = h & 0x03FFu;
  if (exponent == 0) {
    const float mag = static_cast<float>(mantissa) * 0x1.0p-24f;
    return sign ? -mag : mag;
  }
  if (exponent == 31) return std::bit_cast<float>(sign | 0x7F800000u | (mantissa << 13));
  return std::bit_cast<float>(sign | ((exponent + 112u) << 23) | (mantissa << 13));
}

}  // namespace aotp
