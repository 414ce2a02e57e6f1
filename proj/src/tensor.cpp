#include "embedkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "embedkit/rng.hpp"

namespace embedkit {

namespace {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ConfigError("tensor: negative dimension");
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  impl->needs_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  impl->needs_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

int Tensor::rows() const {
  if (rank() != 2) throw ContractError("rows(): tensor is not rank-2");
  return impl_->shape[0];
}

int Tensor::cols() const {
  if (rank() != 2) throw ContractError("cols(): tensor is not rank-2");
  return impl_->shape[1];
}

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item(): tensor is not scalar");
  return impl_->data[0];
}

float Tensor::at(int r, int c) const {
  return impl_->data[static_cast<size_t>(r) * static_cast<size_t>(cols()) +
                     static_cast<size_t>(c)];
}

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad(): no gradient present");
  return impl_->grad;
}

std::span<float> Tensor::grad_buffer() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::clone() const {
  Tensor t = from_data(impl_->shape, impl_->data, impl_->requires_grad);
  t.impl_->name = impl_->name;
  return t;
}

void check_finite(std::span<const float> values, const char* op_name) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name) + ": non-finite value produced");
    }
  }
}

void Tape::backward(const Tensor& loss) {
  if (backward_done_) {
    throw ContractError("backward: called twice on the same tape");
  }
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar");
  }
  const auto target = loss.impl();
  bool on_tape = false;
  for (const auto& node : nodes_) {
    if (node.output == target) {
      on_tape = true;
      break;
    }
  }
  if (!on_tape) {
    throw ContractError("backward: loss was not produced on this tape");
  }
  backward_done_ = true;
  target->grad.assign(1, 1.0f);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output->grad.empty()) it->backward_fn();
  }
}

// ---------------------------------------------------------------------------
// op plumbing
// ---------------------------------------------------------------------------

namespace {

constexpr float kGeluSqrt2OverPi = 0.7978845608028654f;
constexpr float kGeluCoeff = 0.044715f;

Tensor alloc_output(std::vector<int> shape) { return Tensor::zeros(std::move(shape)); }

// Marks the output as being on a gradient path and hands grads to inputs.
void finish_op(Tape& tape, Tensor& out, std::span<const Tensor> inputs,
               std::function<void()> backward_fn, const char* op_name) {
  check_finite(out.data(), op_name);
  if (!tape.recording()) return;
  bool needs = false;
  for (const auto& t : inputs) {
    if (t.needs_grad()) {
      needs = true;
      break;
    }
  }
  if (needs) {
    out.impl()->needs_grad = true;
    tape.record(out.impl(), std::move(backward_fn));
  }
}

void finish_op(Tape& tape, Tensor& out, std::initializer_list<Tensor> inputs,
               std::function<void()> backward_fn, const char* op_name) {
  std::vector<Tensor> v(inputs);
  finish_op(tape, out, std::span<const Tensor>(v), std::move(backward_fn), op_name);
}

std::span<float> grad_of(const Tensor& t) {
  return const_cast<Tensor&>(t).grad_buffer();
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = alloc_output({m, n});
  kernels::sgemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n,
                    false);
  finish_op(tape, out, {a, b},
            [a, b, out, m, k, n]() {
              const float* g = out.impl()->grad.data();
              if (a.needs_grad()) {
                kernels::sgemm_nt(g, b.data().data(), grad_of(a).data(), m, n, k, true);
              }
              if (b.needs_grad()) {
                kernels::sgemm_tn(a.data().data(), g, grad_of(b).data(), m, k, n, true);
              }
            },
            "matmul");
  return out;
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()) + "^T");
  }
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = alloc_output({m, n});
  kernels::sgemm_nt(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n,
                    false);
  finish_op(tape, out, {a, b},
            [a, b, out, m, k, n]() {
              const float* g = out.impl()->grad.data();
              // c = a.b^T  =>  da = g.b ; db = g^T.a
              if (a.needs_grad()) {
                kernels::sgemm_nn(g, b.data().data(), grad_of(a).data(), m, n, k, true);
              }
              if (b.needs_grad()) {
                kernels::sgemm_tn(g, a.data().data(), grad_of(b).data(), m, n, k, true);
              }
            },
            "matmul_nt");
  return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  if (x.cols() != w.rows() || bias.rank() != 1 || bias.dim(0) != w.cols()) {
    throw DimensionError("linear: shapes " + shape_str(x.shape()) + " . " +
                         shape_str(w.shape()) + " + " + shape_str(bias.shape()));
  }
  const int m = x.rows(), k = x.cols(), n = w.cols();
  Tensor out = alloc_output({m, n});
  float* o = out.mutable_data().data();
  const float* bp = bias.data().data();
  for (int i = 0; i < m; ++i) std::memcpy(o + static_cast<size_t>(i) * n, bp, sizeof(float) * static_cast<size_t>(n));
  kernels::sgemm_nn(x.data().data(), w.data().data(), o, m, k, n, true);
  finish_op(tape, out, {x, w, bias},
            [x, w, bias, out, m, k, n]() {
              const float* g = out.impl()->grad.data();
              if (x.needs_grad()) {
                kernels::sgemm_nt(g, w.data().data(), grad_of(x).data(), m, n, k, true);
              }
              if (w.needs_grad()) {
                kernels::sgemm_tn(x.data().data(), g, grad_of(w).data(), m, k, n, true);
              }
              if (bias.needs_grad()) {
                float* bg = grad_of(bias).data();
                for (int i = 0; i < m; ++i) {
                  const float* gr = g + static_cast<size_t>(i) * n;
                  for (int j = 0; j < n; ++j) bg[j] += gr[j];
                }
              }
            },
            "linear");
  return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = alloc_output(a.shape());
  const auto av = a.data();
  const auto bv = b.data();
  auto ov = out.mutable_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  finish_op(tape, out, {a, b},
            [a, b, out]() {
              const auto& g = out.impl()->grad;
              if (a.needs_grad()) {
                auto ga = grad_of(a);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
              }
              if (b.needs_grad()) {
                auto gb = grad_of(b);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
              }
            },
            "add");
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = alloc_output(a.shape());
  const auto av = a.data();
  const auto bv = b.data();
  auto ov = out.mutable_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  finish_op(tape, out, {a, b},
            [a, b, out]() {
              const auto& g = out.impl()->grad;
              if (a.needs_grad()) {
                auto ga = grad_of(a);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
              }
              if (b.needs_grad()) {
                auto gb = grad_of(b);
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
              }
            },
            "sub");
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = alloc_output(a.shape());
  const auto av = a.data();
  const auto bv = b.data();
  auto ov = out.mutable_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  finish_op(tape, out, {a, b},
            [a, b, out]() {
              const auto& g = out.impl()->grad;
              if (a.needs_grad()) {
                auto ga = grad_of(a);
                const auto bv2 = b.data();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
              }
              if (b.needs_grad()) {
                auto gb = grad_of(b);
                const auto av2 = a.data();
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
              }
            },
            "mul");
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, float s) {
  Tensor out = alloc_output(a.shape());
  const auto av = a.data();
  auto ov = out.mutable_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
  finish_op(tape, out, {a},
            [a, out, s]() {
              if (!a.needs_grad()) return;
              const auto& g = out.impl()->grad;
              auto ga = grad_of(a);
              for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
            },
            "scale");
  return out;
}

Tensor sum(Tape& tape, const Tensor& a) {
  Tensor out = alloc_output({1});
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  out.mutable_data()[0] = static_cast<float>(acc);
  finish_op(tape, out, {a},
            [a, out]() {
              if (!a.needs_grad()) return;
              const float g = out.impl()->grad[0];
              auto ga = grad_of(a);
              for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
            },
            "sum");
  return out;
}

Tensor mean_squared_error(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  Tensor out = alloc_output({1});
  const auto av = a.data();
  const auto bv = b.data();
  double acc = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    acc += d * d;
  }
  const float inv_n = 1.0f / static_cast<float>(av.size());
  out.mutable_data()[0] = static_cast<float>(acc) * inv_n;
  finish_op(tape, out, {a, b},
            [a, b, out, inv_n]() {
              const float g = out.impl()->grad[0] * 2.0f * inv_n;
              const auto av2 = a.data();
              const auto bv2 = b.data();
              if (a.needs_grad()) {
                auto ga = grad_of(a);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += g * (av2[i] - bv2[i]);
              }
              if (b.needs_grad()) {
                auto gb = grad_of(b);
                for (size_t i = 0; i < gb.size(); ++i) gb[i] -= g * (av2[i] - bv2[i]);
              }
            },
            "mse");
  return out;
}

Tensor gelu(Tape& tape, const Tensor& x) {
  Tensor out = alloc_output(x.shape());
  const auto xv = x.data();
  auto ov = out.mutable_data();
  for (size_t i = 0; i < ov.size(); ++i) {
    const float v = xv[i];
    const float u = kGeluSqrt2OverPi * (v + kGeluCoeff * v * v * v);
    ov[i] = 0.5f * v * (1.0f + std::tanh(u));
  }
  finish_op(tape, out, {x},
            [x, out]() {
              if (!x.needs_grad()) return;
              const auto& g = out.impl()->grad;
              const auto xv2 = x.data();
              auto gx = grad_of(x);
              for (size_t i = 0; i < g.size(); ++i) {
                const float v = xv2[i];
                const float u = kGeluSqrt2OverPi * (v + kGeluCoeff * v * v * v);
                const float t = std::tanh(u);
                const float du = kGeluSqrt2OverPi * (1.0f + 3.0f * kGeluCoeff * v * v);
                gx[i] += g[i] * (0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du);
              }
            },
            "gelu");
  return out;
}

// ---------------------------------------------------------------------------
// normalization and softmax
// ---------------------------------------------------------------------------

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps) {
  require_rank2(x, "layer_norm");
  if (eps <= 0.0f) throw ConfigError("layer_norm: eps must be > 0");
  const int n = x.rows(), h = x.cols();
  if (gamma.rank() != 1 || gamma.dim(0) != h || beta.rank() != 1 || beta.dim(0) != h) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(h) + "]");
  }
  Tensor out = alloc_output({n, h});
  auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(n) * h);
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto ov = out.mutable_data();
  for (int i = 0; i < n; ++i) {
    const float* row = xv.data() + static_cast<size_t>(i) * h;
    float mean = 0.0f;
    for (int j = 0; j < h; ++j) mean += row[j];
    mean /= static_cast<float>(h);
    float var = 0.0f;
    for (int j = 0; j < h; ++j) {
      const float d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<float>(h);
    const float is = 1.0f / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = is;
    float* xh = xhat->data() + static_cast<size_t>(i) * h;
    float* orow = ov.data() + static_cast<size_t>(i) * h;
    for (int j = 0; j < h; ++j) {
      xh[j] = (row[j] - mean) * is;
      orow[j] = gv[j] * xh[j] + bv[j];
    }
  }
  finish_op(tape, out, {x, gamma, beta},
            [x, gamma, beta, out, xhat, inv_std, n, h]() {
              const float* g = out.impl()->grad.data();
              const auto gv2 = gamma.data();
              if (gamma.needs_grad()) {
                auto gg = grad_of(gamma);
                for (int i = 0; i < n; ++i) {
                  const float* gr = g + static_cast<size_t>(i) * h;
                  const float* xh = xhat->data() + static_cast<size_t>(i) * h;
                  for (int j = 0; j < h; ++j) gg[j] += gr[j] * xh[j];
                }
              }
              if (beta.needs_grad()) {
                auto gb = grad_of(beta);
                for (int i = 0; i < n; ++i) {
                  const float* gr = g + static_cast<size_t>(i) * h;
                  for (int j = 0; j < h; ++j) gb[j] += gr[j];
                }
              }
              if (x.needs_grad()) {
                auto gx = grad_of(x);
                for (int i = 0; i < n; ++i) {
                  const float* gr = g + static_cast<size_t>(i) * h;
                  const float* xh = xhat->data() + static_cast<size_t>(i) * h;
                  const float is = (*inv_std)[static_cast<size_t>(i)];
                  float sum_gy = 0.0f, sum_gyx = 0.0f;
                  for (int j = 0; j < h; ++j) {
                    const float gy = gr[j] * gv2[j];
                    sum_gy += gy;
                    sum_gyx += gy * xh[j];
                  }
                  const float inv_h = 1.0f / static_cast<float>(h);
                  float* gxr = gx.data() + static_cast<size_t>(i) * h;
                  for (int j = 0; j < h; ++j) {
                    const float gy = gr[j] * gv2[j];
                    gxr[j] += is * (gy - inv_h * sum_gy - xh[j] * inv_h * sum_gyx);
                  }
                }
              }
            },
            "layer_norm");
  return out;
}

Tensor softmax_rows(Tape& tape, const Tensor& x) {
  require_rank2(x, "softmax_rows");
  const int n = x.rows(), m = x.cols();
  Tensor out = alloc_output({n, m});
  const auto xv = x.data();
  auto ov = out.mutable_data();
  for (int i = 0; i < n; ++i) {
    const float* row = xv.data() + static_cast<size_t>(i) * m;
    float* orow = ov.data() + static_cast<size_t>(i) * m;
    float mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    float denom = 0.0f;
    for (int j = 0; j < m; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    const float inv = 1.0f / denom;
    for (int j = 0; j < m; ++j) orow[j] *= inv;
  }
  finish_op(tape, out, {x},
            [x, out, n, m]() {
              if (!x.needs_grad()) return;
              const float* g = out.impl()->grad.data();
              const auto yv = out.data();
              auto gx = grad_of(x);
              for (int i = 0; i < n; ++i) {
                const float* gr = g + static_cast<size_t>(i) * m;
                const float* yr = yv.data() + static_cast<size_t>(i) * m;
                float dot = 0.0f;
                for (int j = 0; j < m; ++j) dot += gr[j] * yr[j];
                float* gxr = gx.data() + static_cast<size_t>(i) * m;
                for (int j = 0; j < m; ++j) gxr[j] += yr[j] * (gr[j] - dot);
              }
            },
            "softmax_rows");
  return out;
}

Tensor dropout(Tape& tape, const Tensor& x, float p, uint64_t seed, bool training) {
  if (p < 0.0f || p >= 1.0f) throw ConfigError("dropout: p must be in [0, 1)");
  if (!training || p == 0.0f) {
    // identity, but still a distinct node so grads flow
    return scale(tape, x, 1.0f);
  }
  Tensor out = alloc_output(x.shape());
  auto mask = std::make_shared<std::vector<float>>(x.data().size());
  SplitRng rng(seed);
  const float keep_scale = 1.0f / (1.0f - p);
  const auto xv = x.data();
  auto ov = out.mutable_data();
  for (size_t i = 0; i < ov.size(); ++i) {
    const float m = rng.next_float() < p ? 0.0f : keep_scale;
    (*mask)[i] = m;
    ov[i] = xv[i] * m;
  }
  finish_op(tape, out, {x},
            [x, out, mask]() {
              if (!x.needs_grad()) return;
              const auto& g = out.impl()->grad;
              auto gx = grad_of(x);
              for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
            },
            "dropout");
  return out;
}

// ---------------------------------------------------------------------------
// gather / scatter / layout
// ---------------------------------------------------------------------------

Tensor embedding_gather(Tape& tape, const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding_gather");
  const int rows = table.rows(), h = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= rows) {
      throw DataError("embedding_gather: id " + std::to_string(id) + " out of range [0," +
                      std::to_string(rows) + ")");
    }
  }
  Tensor out = alloc_output({static_cast<int>(ids.size()), h});
  const auto tv = table.data();
  auto ov = out.mutable_data();
  for (size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(ov.data() + i * static_cast<size_t>(h),
                tv.data() + static_cast<size_t>(ids[i]) * h, sizeof(float) * static_cast<size_t>(h));
  }
  auto idv = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  finish_op(tape, out, {table},
            [table, out, idv, h]() {
              if (!table.needs_grad()) return;
              const float* g = out.impl()->grad.data();
              auto gt = grad_of(table);
              for (size_t i = 0; i < idv->size(); ++i) {
                float* dst = gt.data() + static_cast<size_t>((*idv)[i]) * h;
                const float* src = g + i * static_cast<size_t>(h);
                for (int j = 0; j < h; ++j) dst[j] += src[j];
              }
            },
            "embedding_gather");
  return out;
}

Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const int> indices) {
  require_rank2(x, "gather_rows");
  const int rows = x.rows(), h = x.cols();
  for (int r : indices) {
    if (r < 0 || r >= rows) throw ContractError("gather_rows: row index out of range");
  }
  Tensor out = alloc_output({static_cast<int>(indices.size()), h});
  const auto xv = x.data();
  auto ov = out.mutable_data();
  for (size_t i = 0; i < indices.size(); ++i) {
    std::memcpy(ov.data() + i * static_cast<size_t>(h),
                xv.data() + static_cast<size_t>(indices[i]) * h,
                sizeof(float) * static_cast<size_t>(h));
  }
  auto idv = std::make_shared<std::vector<int>>(indices.begin(), indices.end());
  finish_op(tape, out, {x},
            [x, out, idv, h]() {
              if (!x.needs_grad()) return;
              const float* g = out.impl()->grad.data();
              auto gx = grad_of(x);
              for (size_t i = 0; i < idv->size(); ++i) {
                float* dst = gx.data() + static_cast<size_t>((*idv)[i]) * h;
                const float* src = g + i * static_cast<size_t>(h);
                for (int j = 0; j < h; ++j) dst[j] += src[j];
              }
            },
            "gather_rows");
  return out;
}

Tensor block(Tape& tape, const Tensor& x, int row0, int rows, int col0, int cols) {
  require_rank2(x, "block");
  if (row0 < 0 || col0 < 0 || rows < 0 || cols < 0 || row0 + rows > x.rows() ||
      col0 + cols > x.cols()) {
    throw DimensionError("block: region out of bounds");
  }
  Tensor out = alloc_output({rows, cols});
  const int xc = x.cols();
  const auto xv = x.data();
  auto ov = out.mutable_data();
  for (int i = 0; i < rows; ++i) {
    std::memcpy(ov.data() + static_cast<size_t>(i) * cols,
                xv.data() + (static_cast<size_t>(row0 + i) * xc + col0),
                sizeof(float) * static_cast<size_t>(cols));
  }
  finish_op(tape, out, {x},
            [x, out, row0, rows, col0, cols, xc]() {
              if (!x.needs_grad()) return;
              const float* g = out.impl()->grad.data();
              auto gx = grad_of(x);
              for (int i = 0; i < rows; ++i) {
                float* dst = gx.data() + (static_cast<size_t>(row0 + i) * xc + col0);
                const float* src = g + static_cast<size_t>(i) * cols;
                for (int j = 0; j < cols; ++j) dst[j] += src[j];
              }
            },
            "block");
  return out;
}

Tensor concat_heads(Tape& tape, std::span<const Tensor> parts, int b_count, int seq,
                    int heads, int dh) {
  if (static_cast<int>(parts.size()) != b_count * heads) {
    throw ContractError("concat_heads: expected b_count*heads parts");
  }
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != seq || p.cols() != dh) {
      throw DimensionError("concat_heads: each part must be [seq x dh]");
    }
  }
  const int h = heads * dh;
  Tensor out = alloc_output({b_count * seq, h});
  auto ov = out.mutable_data();
  for (int b = 0; b < b_count; ++b) {
    for (int hd = 0; hd < heads; ++hd) {
      const auto pv = parts[static_cast<size_t>(b * heads + hd)].data();
      for (int t = 0; t < seq; ++t) {
        std::memcpy(ov.data() + (static_cast<size_t>(b * seq + t) * h + hd * dh),
                    pv.data() + static_cast<size_t>(t) * dh, sizeof(float) * static_cast<size_t>(dh));
      }
    }
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  auto held = std::make_shared<std::vector<Tensor>>(inputs);
  Tensor out_copy = out;
  finish_op(tape, out, inputs,
            [held, out_copy, b_count, seq, heads, dh, h]() {
              const float* g = out_copy.impl()->grad.data();
              for (int b = 0; b < b_count; ++b) {
                for (int hd = 0; hd < heads; ++hd) {
                  Tensor& part = (*held)[static_cast<size_t>(b * heads + hd)];
                  if (!part.needs_grad()) continue;
                  auto gp = part.grad_buffer();
                  for (int t = 0; t < seq; ++t) {
                    const float* src = g + (static_cast<size_t>(b * seq + t) * h + hd * dh);
                    float* dst = gp.data() + static_cast<size_t>(t) * dh;
                    for (int j = 0; j < dh; ++j) dst[j] += src[j];
                  }
                }
              }
            },
            "concat_heads");
  return out;
}

Tensor replace_rows(Tape& tape, const Tensor& base, const Tensor& rows,
                    std::span<const int> replace_at) {
  require_rank2(base, "replace_rows");
  require_rank2(rows, "replace_rows");
  if (rows.cols() != base.cols() || rows.rows() != static_cast<int>(replace_at.size())) {
    throw DimensionError("replace_rows: rows must be [|replace_at| x base.cols]");
  }
  const int h = base.cols();
  Tensor out = alloc_output(base.shape());
  auto ov = out.mutable_data();
  std::memcpy(ov.data(), base.data().data(), sizeof(float) * base.data().size());
  const auto rv = rows.data();
  auto replaced = std::make_shared<std::vector<int>>(replace_at.begin(), replace_at.end());
  for (size_t i = 0; i < replaced->size(); ++i) {
    const int r = (*replaced)[i];
    if (r < 0 || r >= base.rows()) throw ContractError("replace_rows: index out of range");
    std::memcpy(ov.data() + static_cast<size_t>(r) * h, rv.data() + i * static_cast<size_t>(h),
                sizeof(float) * static_cast<size_t>(h));
  }
  finish_op(tape, out, {base, rows},
            [base, rows, out, replaced, h]() {
              const float* g = out.impl()->grad.data();
              std::vector<char> is_replaced(static_cast<size_t>(base.rows()), 0);
              for (int r : *replaced) is_replaced[static_cast<size_t>(r)] = 1;
              if (base.needs_grad()) {
                auto gb = grad_of(base);
                for (int r = 0; r < base.rows(); ++r) {
                  if (is_replaced[static_cast<size_t>(r)]) continue;
                  const float* src = g + static_cast<size_t>(r) * h;
                  float* dst = gb.data() + static_cast<size_t>(r) * h;
                  for (int j = 0; j < h; ++j) dst[j] += src[j];
                }
              }
              if (rows.needs_grad()) {
                auto gr = grad_of(rows);
                for (size_t i = 0; i < replaced->size(); ++i) {
                  const float* src = g + static_cast<size_t>((*replaced)[i]) * h;
                  float* dst = gr.data() + i * static_cast<size_t>(h);
                  for (int j = 0; j < h; ++j) dst[j] += src[j];
                }
              }
            },
            "replace_rows");
  return out;
}

Tensor add_row_broadcast(Tape& tape, const Tensor& x, std::span<const float> penalty) {
  require_rank2(x, "add_row_broadcast");
  if (static_cast<int>(penalty.size()) != x.cols()) {
    throw DimensionError("add_row_broadcast: penalty length must equal cols");
  }
  const int n = x.rows(), m = x.cols();
  Tensor out = alloc_output({n, m});
  const auto xv = x.data();
  auto ov = out.mutable_data();
  for (int i = 0; i < n; ++i) {
    const float* row = xv.data() + static_cast<size_t>(i) * m;
    float* orow = ov.data() + static_cast<size_t>(i) * m;
    for (int j = 0; j < m; ++j) orow[j] = row[j] + penalty[static_cast<size_t>(j)];
  }
  finish_op(tape, out, {x},
            [x, out]() {
              if (!x.needs_grad()) return;
              const auto& g = out.impl()->grad;
              auto gx = grad_of(x);
              for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            },
            "add_row_broadcast");
  return out;
}

Tensor l2_normalize_rows(Tape& tape, const Tensor& x) {
  require_rank2(x, "l2_normalize_rows");
  const int n = x.rows(), h = x.cols();
  constexpr float kEps = 1e-12f;
  Tensor out = alloc_output({n, h});
  auto norms = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
  const auto xv = x.data();
  auto ov = out.mutable_data();
  for (int i = 0; i < n; ++i) {
    const float* row = xv.data() + static_cast<size_t>(i) * h;
    float sq = 0.0f;
    for (int j = 0; j < h; ++j) sq += row[j] * row[j];
    const float norm = std::max(std::sqrt(sq), kEps);
    (*norms)[static_cast<size_t>(i)] = norm;
    float* orow = ov.data() + static_cast<size_t>(i) * h;
    const float inv = 1.0f / norm;
    for (int j = 0; j < h; ++j) orow[j] = row[j] * inv;
  }
  finish_op(tape, out, {x},
            [x, out, norms, n, h]() {
              if (!x.needs_grad()) return;
              const float* g = out.impl()->grad.data();
              const auto yv = out.data();
              auto gx = grad_of(x);
              for (int i = 0; i < n; ++i) {
                const float* gr = g + static_cast<size_t>(i) * h;
                const float* yr = yv.data() + static_cast<size_t>(i) * h;
                float dot = 0.0f;
                for (int j = 0; j < h; ++j) dot += gr[j] * yr[j];
                const float inv = 1.0f / (*norms)[static_cast<size_t>(i)];
                float* gxr = gx.data() + static_cast<size_t>(i) * h;
                for (int j = 0; j < h; ++j) gxr[j] += inv * (gr[j] - dot * yr[j]);
              }
            },
            "l2_normalize_rows");
  return out;
}

Tensor pool_sequences(Tape& tape, const Tensor& states, std::span<const float> mask,
                      int b_count, int seq, Pooling kind) {
  require_rank2(states, "pool_sequences");
  if (states.rows() != b_count * seq) {
    throw DimensionError("pool_sequences: states rows != b_count*seq");
  }
  if (static_cast<int>(mask.size()) != b_count * seq) {
    throw DimensionError("pool_sequences: mask length != b_count*seq");
  }
  const int h = states.cols();
  Tensor out = alloc_output({b_count, h});
  const auto sv = states.data();
  auto ov = out.mutable_data();
  auto maskv = std::make_shared<std::vector<float>>(mask.begin(), mask.end());
  auto argmax = std::make_shared<std::vector<int>>();
  if (kind == Pooling::MAX) argmax->assign(static_cast<size_t>(b_count) * h, 0);

  for (int b = 0; b < b_count; ++b) {
    float count = 0.0f;
    for (int t = 0; t < seq; ++t) count += mask[static_cast<size_t>(b * seq + t)];
    if (kind != Pooling::CLS && count <= 0.0f) {
      throw DataError("pool_sequences: sequence " + std::to_string(b) + " has no real tokens");
    }
    float* orow = ov.data() + static_cast<size_t>(b) * h;
    if (kind == Pooling::CLS) {
      std::memcpy(orow, sv.data() + static_cast<size_t>(b * seq) * h, sizeof(float) * static_cast<size_t>(h));
    } else if (kind == Pooling::MEAN) {
      const float inv = 1.0f / count;
      for (int t = 0; t < seq; ++t) {
        const float m = mask[static_cast<size_t>(b * seq + t)];
        if (m == 0.0f) continue;
        const float* row = sv.data() + static_cast<size_t>(b * seq + t) * h;
        for (int j = 0; j < h; ++j) orow[j] += row[j] * m * inv;
      }
    } else {  // MAX
      bool first = true;
      for (int t = 0; t < seq; ++t) {
        if (mask[static_cast<size_t>(b * seq + t)] == 0.0f) continue;
        const float* row = sv.data() + static_cast<size_t>(b * seq + t) * h;
        if (first) {
          for (int j = 0; j < h; ++j) {
            orow[j] = row[j];
            (*argmax)[static_cast<size_t>(b) * h + j] = b * seq + t;
          }
          first = false;
        } else {
          for (int j = 0; j < h; ++j) {
            if (row[j] > orow[j]) {
              orow[j] = row[j];
              (*argmax)[static_cast<size_t>(b) * h + j] = b * seq + t;
            }
          }
        }
      }
    }
  }
  finish_op(tape, out, {states},
            [states, out, maskv, argmax, b_count, seq, h, kind]() {
              if (!states.needs_grad()) return;
              const float* g = out.impl()->grad.data();
              auto gs = grad_of(states);
              for (int b = 0; b < b_count; ++b) {
                const float* gr = g + static_cast<size_t>(b) * h;
                if (kind == Pooling::CLS) {
                  float* dst = gs.data() + static_cast<size_t>(b * seq) * h;
                  for (int j = 0; j < h; ++j) dst[j] += gr[j];
                } else if (kind == Pooling::MEAN) {
                  float count = 0.0f;
                  for (int t = 0; t < seq; ++t) count += (*maskv)[static_cast<size_t>(b * seq + t)];
                  const float inv = 1.0f / count;
                  for (int t = 0; t < seq; ++t) {
                    const float m = (*maskv)[static_cast<size_t>(b * seq + t)];
                    if (m == 0.0f) continue;
                    float* dst = gs.data() + static_cast<size_t>(b * seq + t) * h;
                    for (int j = 0; j < h; ++j) dst[j] += gr[j] * m * inv;
                  }
                } else {
                  for (int j = 0; j < h; ++j) {
                    const int src_row = (*argmax)[static_cast<size_t>(b) * h + j];
                    gs[static_cast<size_t>(src_row) * h + static_cast<size_t>(j)] += gr[j];
                  }
                }
              }
            },
            "pool_sequences");
  return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Tensor cross_entropy_mean(Tape& tape, const Tensor& logits, std::span<const int> targets) {
  require_rank2(logits, "cross_entropy_mean");
  const int n = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != n) {
    throw DimensionError("cross_entropy_mean: targets length != rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= v) throw DataError("cross_entropy_mean: target out of range");
  }
  Tensor out = alloc_output({1});
  auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(n) * v);
  const auto lv = logits.data();
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* row = lv.data() + static_cast<size_t>(i) * v;
    float* prow = probs->data() + static_cast<size_t>(i) * v;
    float mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    float denom = 0.0f;
    for (int j = 0; j < v; ++j) {
      prow[j] = std::exp(row[j] - mx);
      denom += prow[j];
    }
    const float inv = 1.0f / denom;
    for (int j = 0; j < v; ++j) prow[j] *= inv;
    const float lse = mx + std::log(denom);
    total += static_cast<double>(lse) - static_cast<double>(row[targets[static_cast<size_t>(i)]]);
  }
  out.mutable_data()[0] = static_cast<float>(total / n);
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  finish_op(tape, out, {logits},
            [logits, out, probs, tgt, n, v]() {
              if (!logits.needs_grad()) return;
              const float g = out.impl()->grad[0] / static_cast<float>(n);
              auto gl = grad_of(logits);
              for (int i = 0; i < n; ++i) {
                const float* prow = probs->data() + static_cast<size_t>(i) * v;
                float* grow = gl.data() + static_cast<size_t>(i) * v;
                const int t = (*tgt)[static_cast<size_t>(i)];
                for (int j = 0; j < v; ++j) {
                  grow[j] += g * (prow[j] - (j == t ? 1.0f : 0.0f));
                }
              }
            },
            "cross_entropy_mean");
  return out;
}

Tensor soft_cross_entropy_mean(Tape& tape, const Tensor& logits, const Tensor& target_probs) {
  require_rank2(logits, "soft_cross_entropy_mean");
  require_same_shape(logits, target_probs, "soft_cross_entropy_mean");
  const int n = logits.rows(), m = logits.cols();
  Tensor out = alloc_output({1});
  auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(n) * m);
  const auto lv = logits.data();
  const auto pv = target_probs.data();
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* row = lv.data() + static_cast<size_t>(i) * m;
    const float* trow = pv.data() + static_cast<size_t>(i) * m;
    float* prow = probs->data() + static_cast<size_t>(i) * m;
    float mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    float denom = 0.0f;
    for (int j = 0; j < m; ++j) {
      prow[j] = std::exp(row[j] - mx);
      denom += prow[j];
    }
    const float inv = 1.0f / denom;
    const float lse = mx + std::log(denom);
    double row_loss = 0.0;
    for (int j = 0; j < m; ++j) {
      prow[j] *= inv;
      row_loss += static_cast<double>(trow[j]) * (static_cast<double>(lse) - static_cast<double>(row[j]));
    }
    total += row_loss;
  }
  out.mutable_data()[0] = static_cast<float>(total / n);
  finish_op(tape, out, {logits},
            [logits, target_probs, out, probs, n, m]() {
              if (!logits.needs_grad()) return;
              const float g = out.impl()->grad[0] / static_cast<float>(n);
              const auto pv2 = target_probs.data();
              auto gl = grad_of(logits);
              for (int i = 0; i < n; ++i) {
                const float* prow = probs->data() + static_cast<size_t>(i) * m;
                const float* trow = pv2.data() + static_cast<size_t>(i) * m;
                float psum = 0.0f;
                for (int j = 0; j < m; ++j) psum += trow[j];
                float* grow = gl.data() + static_cast<size_t>(i) * m;
                for (int j = 0; j < m; ++j) grow[j] += g * (prow[j] * psum - trow[j]);
              }
            },
            "soft_cross_entropy_mean");
  return out;
}

Tensor bce_with_logits_mean(Tape& tape, const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "bce_with_logits_mean");
  Tensor out = alloc_output({1});
  const auto lv = logits.data();
  const auto tv = targets.data();
  double total = 0.0;
  for (size_t i = 0; i < lv.size(); ++i) {
    const double x = lv[i];
    const double t = tv[i];
    // max(x,0) - x*t + log(1 + exp(-|x|))
    total += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::fabs(x)));
  }
  const float inv_n = 1.0f / static_cast<float>(lv.size());
  out.mutable_data()[0] = static_cast<float>(total) * inv_n;
  finish_op(tape, out, {logits, targets},
            [logits, targets, out, inv_n]() {
              if (!logits.needs_grad()) return;
              const float g = out.impl()->grad[0] * inv_n;
              const auto lv2 = logits.data();
              const auto tv2 = targets.data();
              auto gl = grad_of(logits);
              for (size_t i = 0; i < lv2.size(); ++i) {
                const float sig = 1.0f / (1.0f + std::exp(-lv2[i]));
                gl[i] += g * (sig - tv2[i]);
              }
            },
            "bce_with_logits_mean");
  return out;
}

Tensor exclude_diag(Tape& tape, const Tensor& x) {
  require_rank2(x, "exclude_diag");
  const int n = x.rows();
  if (x.cols() != n) throw DimensionError("exclude_diag: matrix must be square");
  if (n < 2) throw ConfigError("exclude_diag: need at least a 2x2 matrix");
  Tensor out = alloc_output({n, n - 1});
  const auto xv = x.data();
  auto ov = out.mutable_data();
  for (int i = 0; i < n; ++i) {
    const float* row = xv.data() + static_cast<size_t>(i) * n;
    float* orow = ov.data() + static_cast<size_t>(i) * (n - 1);
    int k = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      orow[k++] = row[j];
    }
  }
  finish_op(tape, out, {x},
            [x, out, n]() {
              if (!x.needs_grad()) return;
              const float* g = out.impl()->grad.data();
              auto gx = grad_of(x);
              for (int i = 0; i < n; ++i) {
                const float* gr = g + static_cast<size_t>(i) * (n - 1);
                float* gxr = gx.data() + static_cast<size_t>(i) * n;
                int k = 0;
                for (int j = 0; j < n; ++j) {
                  if (j == i) continue;
                  gxr[j] += gr[k++];
                }
              }
            },
            "exclude_diag");
  return out;
}

}  // namespace embedkit
