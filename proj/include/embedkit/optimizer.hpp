#pragma once

#include <cstdint>
#include <vector>

#include "embedkit/tensor.hpp"

namespace embedkit {

struct AdamWConfig {
  float beta1{0.9f};
  float beta2{0.999f};
  float eps{1e-8f};
  float weight_decay{0.01f};
  float clip_norm{0.0f};  // 0 disables global-norm clipping
};

// AdamW with bias correction; decay decoupled from the adaptive term,
// applied as theta <- theta - lr*wd*theta.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg = {});

  // consumes grads from the parameters' grad buffers (missing grad = zero)
  void step(float lr);
  void zero_grads();

  int64_t step_count() const { return step_count_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  AdamWConfig cfg_;
  int64_t step_count_{0};
};

// linear warmup to peak, then cosine decay to zero
struct Schedule {
  float peak_lr{1e-3f};
  int total_steps{1000};
  float warmup_frac{0.10f};

  int warmup_steps() const;
};

float lr_at(const Schedule& sched, int step);

}  // namespace embedkit
