#include <cstring>

#include "embedkit/tensor.hpp"

// Hot matrix kernels, kept in one translation unit so the build can apply
// aggressive optimization flags here without touching NaN semantics anywhere
// else. Inner loops run over contiguous memory in all three layouts.

namespace embedkit::kernels {

void sgemm_nn(const float* a, const float* b, float* c, int m, int k, int n,
              bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * static_cast<size_t>(n));
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float aip = arow[p];
      if (aip == 0.0f) continue;
      const float* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void sgemm_nt(const float* a, const float* b, float* c, int m, int k, int n,
              bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<size_t>(j) * k;
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      if (accumulate) {
        crow[j] += acc;
      } else {
        crow[j] = acc;
      }
    }
  }
}

void sgemm_tn(const float* a, const float* b, float* c, int m, int k, int n,
              bool accumulate) {
  // c[k x n] = a[m x k]^T . b[m x n]
  if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<size_t>(k) * static_cast<size_t>(n));
  for (int p = 0; p < m; ++p) {
    const float* arow = a + static_cast<size_t>(p) * k;
    const float* brow = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < k; ++i) {
      const float api = arow[i];
      if (api == 0.0f) continue;
      float* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

}  // namespace embedkit::kernels
