#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace embedkit {

// FNV-1a, used for config hashes and dataset fingerprints in reports.
// Stability across runs is what matters here, not collision resistance.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t seed = 0xCBF29CE484222325ULL) {
  uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

inline std::string fingerprint(std::string_view bytes) { return hex64(fnv1a64(bytes)); }

}  // namespace embedkit
