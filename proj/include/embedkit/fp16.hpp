#pragma once

#include <cstdint>
#include <cstring>

namespace embedkit {

// IEEE 754 binary16 conversions, round-to-nearest-even. Values beyond the
// f16 range become +-inf; callers that must reject overflow check magnitudes
// against fp16_max() first.

inline constexpr float fp16_max() { return 65504.0f; }

inline uint16_t f32_to_f16(float value) {
  uint32_t bits;
  std::memcpy(&bits, &value, 4);
  const uint32_t sign = (bits >> 16) & 0x8000u;
  const uint32_t abs = bits & 0x7FFFFFFFu;

  if (abs >= 0x7F800000u) {  // inf or nan
    const uint32_t mantissa = abs > 0x7F800000u ? 0x0200u : 0u;
    return static_cast<uint16_t>(sign | 0x7C00u | mantissa);
  }
  if (abs >= 0x477FF000u) {  // rounds to >= 2^16: overflow to inf
    return static_cast<uint16_t>(sign | 0x7C00u);
  }
  if (abs < 0x38800000u) {  // subnormal or zero
    if (abs < 0x33000000u) return static_cast<uint16_t>(sign);  // underflow to 0
    const int shift = 126 - static_cast<int>(abs >> 23);
    uint32_t mant = (abs & 0x7FFFFFu) | 0x800000u;
    const uint32_t rounded = mant >> (shift + 1);
    const uint32_t rem = mant & ((1u << (shift + 1)) - 1u);
    const uint32_t half = 1u << shift;
    uint32_t out = rounded;
    if (rem > half || (rem == half && (rounded & 1u))) out += 1u;
    return static_cast<uint16_t>(sign | out);
  }
  // normal range
  uint32_t exp = (abs >> 23) - 112u;
  uint32_t mant = abs & 0x7FFFFFu;
  uint32_t out = (exp << 10) | (mant >> 13);
  const uint32_t rem = mant & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (out & 1u))) out += 1u;  // may carry into exp
  return static_cast<uint16_t>(sign | out);
}

inline float f16_to_f32(uint16_t h) {
  const uint32_t sign = (static_cast<uint32_t>(h) & 0x8000u) << 16;
  const uint32_t exp = (h >> 10) & 0x1Fu;
  const uint32_t mant = h & 0x3FFu;
  uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: normalize
      int e = -1;
      uint32_t m = mant;
      while ((m & 0x400u) == 0) {
        m <<= 1;
        ++e;
      }
      bits = sign | (static_cast<uint32_t>(113 - e - 1) << 23) | ((m & 0x3FFu) << 13);
    }
  } else if (exp == 0x1Fu) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 112u) << 23) | (mant << 13);
  }
  float out;
  std::memcpy(&out, &bits, 4);
  return out;
}

}  // namespace embedkit
