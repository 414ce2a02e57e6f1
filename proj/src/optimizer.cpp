#include "embedkit/optimizer.hpp"

#include <cmath>

namespace embedkit {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.beta1 < 0.0f || cfg_.beta1 >= 1.0f || cfg_.beta2 < 0.0f || cfg_.beta2 >= 1.0f) {
    throw ConfigError("adamw: betas must be in [0, 1)");
  }
  if (cfg_.eps <= 0.0f) throw ConfigError("adamw: eps must be > 0");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.data().size(), 0.0f);
    v_.emplace_back(p.data().size(), 0.0f);
  }
}

void AdamW::step(float lr) {
  if (lr < 0.0f) throw ConfigError("adamw: lr must be >= 0");
  step_count_ += 1;
  const float b1 = cfg_.beta1;
  const float b2 = cfg_.beta2;
  const float bc1 = 1.0f - std::pow(b1, static_cast<float>(step_count_));
  const float bc2 = 1.0f - std::pow(b2, static_cast<float>(step_count_));

  float clip_scale = 1.0f;
  if (cfg_.clip_norm > 0.0f) {
    double sq = 0.0;
    for (const auto& p : params_) {
      if (!p.has_grad()) continue;
      for (float g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) clip_scale = static_cast<float>(cfg_.clip_norm / norm);
  }

  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    auto theta = p.mutable_data();
    if (m_[i].size() != theta.size()) {
      throw ContractError("adamw: parameter shape changed under the optimizer");
    }
    const float* g = p.has_grad() ? p.grad().data() : nullptr;
    if (g != nullptr && p.grad().size() != theta.size()) {
      throw ContractError("adamw: gradient shape does not match parameter");
    }
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (size_t j = 0; j < theta.size(); ++j) {
      const float gj = (g ? g[j] : 0.0f) * clip_scale;
      m[j] = b1 * m[j] + (1.0f - b1) * gj;
      v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
      const float mhat = m[j] / bc1;
      const float vhat = v[j] / bc2;
      const float update = mhat / (std::sqrt(vhat) + cfg_.eps);
      theta[j] -= lr * update + lr * cfg_.weight_decay * theta[j];
    }
  }
}

void AdamW::zero_grads() {
  for (auto& p : params_) p.zero_grad();
}

int Schedule::warmup_steps() const {
  return static_cast<int>(std::lround(warmup_frac * static_cast<double>(total_steps)));
}

float lr_at(const Schedule& sched, int step) {
  if (step < 0) throw ConfigError("lr_at: step must be >= 0");
  if (sched.total_steps < 1) throw ConfigError("lr_at: total_steps must be >= 1");
  if (step > sched.total_steps) step = sched.total_steps;  // clamp to final value
  const int warmup = sched.warmup_steps();
  if (warmup > 0 && step < warmup) {
    return sched.peak_lr * static_cast<float>(step) / static_cast<float>(warmup);
  }
  const int span = sched.total_steps - warmup;
  if (span <= 0) return step >= sched.total_steps ? 0.0f : sched.peak_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  return static_cast<float>(sched.peak_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * progress)));
}

}  // namespace embedkit
