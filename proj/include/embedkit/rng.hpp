#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace embedkit {

// Splittable counter-based generator (splitmix64 core). Children derived via
// split(stream) are independent streams, so a consumer can key a stream by
// (seed, layer-index, step) and regenerate the exact same values later.
class SplitRng {
 public:
  explicit SplitRng(uint64_t seed) : state_(mix(seed + kGolden)) {}

  SplitRng split(uint64_t stream) const {
    return SplitRng(mix(state_ ^ mix(stream * kStream + kGolden)));
  }

  uint64_t next_u64() {
    state_ += kGolden;
    return mix(state_);
  }

  // uniform in [0, 1)
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  float next_float() { return static_cast<float>(next_double()); }

  // uniform integer in [0, n), n > 0
  uint64_t next_below(uint64_t n) {
    // rejection keeps the draw unbiased
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // standard normal, Box-Muller with cached spare
  double next_gauss() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 1e-300) u1 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // normal(0, stddev) resampled until within +-2 stddev
  float truncated_normal(float stddev) {
    double g = next_gauss();
    while (std::fabs(g) > 2.0) g = next_gauss();
    return static_cast<float>(g * stddev);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      const size_t j = static_cast<size_t>(next_below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

 private:
  static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
  static constexpr uint64_t kStream = 0xBF58476D1CE4E5B9ULL;

  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  uint64_t state_;
  bool has_spare_{false};
  double spare_{0.0};
};

}  // namespace embedkit
