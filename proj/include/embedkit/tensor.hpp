#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "embedkit/errors.hpp"

namespace embedkit {

namespace detail {

struct TensorImpl {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;     // empty until first touched in backward
  bool requires_grad{false};   // leaf the caller wants gradients for
  bool needs_grad{false};      // participates in some gradient path
  std::string name;
};

}  // namespace detail

// Dense row-major f32 tensor. Value type over shared storage: copies alias
// the same buffer. Data is written only at construction time and by the
// optimizer (single-writer training contract); grad is the mutable slot.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  // rank-2 accessors
  int rows() const;
  int cols() const;

  std::span<const float> data() const { return impl_->data; }
  std::span<float> mutable_data() { return impl_->data; }
  float item() const;
  float at(int r, int c) const;

  bool requires_grad() const { return impl_->requires_grad; }
  bool needs_grad() const { return impl_->needs_grad; }
  const std::string& name() const { return impl_->name; }
  void set_name(std::string n) { impl_->name = std::move(n); }

  bool has_grad() const { return defined() && !impl_->grad.empty(); }
  std::span<const float> grad() const;
  // allocates a zeroed grad buffer on first use
  std::span<float> grad_buffer();
  void zero_grad();

  Tensor clone() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape, define-by-run: ops append nodes in execution order, so
// the list is topologically sorted by construction. backward() replays it in
// reverse exactly once; a fresh tape is built for every training step.
class Tape {
 public:
  Tape() : recording_(true) {}
  static Tape inference() {
    Tape t;
    t.recording_ = false;
    return t;
  }

  bool recording() const { return recording_; }
  size_t node_count() const { return nodes_.size(); }

  // loss must be a scalar produced on this tape; a second call without a new
  // tape is a contract violation.
  void backward(const Tensor& loss);

  void record(std::shared_ptr<detail::TensorImpl> output, std::function<void()> backward_fn) {
    nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
  }

 private:
  struct Node {
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  bool recording_{false};
  bool backward_done_{false};
};

// throws NumericError if any element is NaN/Inf
void check_finite(std::span<const float> values, const char* op_name);

// ---------------------------------------------------------------------------
// Ops. Each returns a fresh tensor and, when the tape records and any input
// is on a gradient path, registers a backward rule. All inputs are rank-2
// unless stated otherwise.
// ---------------------------------------------------------------------------

// c[m,n] = a[m,k] . b[k,n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// c[m,n] = a[m,k] . b[n,k]^T  (b stored row-major, untransposed)
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);
// y[n,h] = x[n,k] . w[k,h] + bias[h] broadcast over rows
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);        // same shape
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);        // same shape
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);        // elementwise
Tensor scale(Tape& tape, const Tensor& a, float s);
Tensor sum(Tape& tape, const Tensor& a);                         // -> scalar [1]
Tensor mean_squared_error(Tape& tape, const Tensor& a, const Tensor& b);

Tensor gelu(Tape& tape, const Tensor& x);  // tanh approximation

// per-row normalization of x[n,h], scaled by gamma[h], shifted by beta[h]
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

// rows sum to 1; max-subtracted for stability
Tensor softmax_rows(Tape& tape, const Tensor& x);

// training=true: zero each element with probability p and scale survivors by
// 1/(1-p), mask derived from seed alone; training=false: identity. 0 <= p < 1.
Tensor dropout(Tape& tape, const Tensor& x, float p, uint64_t seed, bool training);

// out[i,:] = table[ids[i],:]; backward scatter-adds into table.grad
Tensor embedding_gather(Tape& tape, const Tensor& table, std::span<const int> ids);

// out[i,:] = x[indices[i],:]
Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const int> indices);

// contiguous submatrix copy
Tensor block(Tape& tape, const Tensor& x, int row0, int rows, int col0, int cols);

// inverse of per-(sequence,head) blocking: parts laid out as blocks[b*heads+h]
// of shape [seq,dh] reassembled into [(b_count*seq), heads*dh]
Tensor concat_heads(Tape& tape, std::span<const Tensor> parts, int b_count, int seq,
                    int heads, int dh);

// base[(replace_at[i]),:] := rows[i,:]; grads route to rows for replaced
// positions and to base elsewhere
Tensor replace_rows(Tape& tape, const Tensor& base, const Tensor& rows,
                    std::span<const int> replace_at);

// adds penalty[j] to every row of x (penalty is constant, no grad)
Tensor add_row_broadcast(Tape& tape, const Tensor& x, std::span<const float> penalty);

// rows scaled to unit L2 norm (guarded by tiny eps against zero rows)
Tensor l2_normalize_rows(Tape& tape, const Tensor& x);

enum class Pooling { CLS, MEAN, MAX };

// states [(b_count*seq), h] + mask [b_count*seq] -> [b_count, h].
// MEAN/MAX honor the mask; a row with no real token is a data error.
Tensor pool_sequences(Tape& tape, const Tensor& states, std::span<const float> mask,
                      int b_count, int seq, Pooling kind);

// mean over rows of -log softmax(logits)[target]; stable log-sum-exp
Tensor cross_entropy_mean(Tape& tape, const Tensor& logits, std::span<const int> targets);

// mean over rows of -sum_j p[i,j] * log softmax(logits)[i,j]; p rows sum to 1
// and are treated as constants
Tensor soft_cross_entropy_mean(Tape& tape, const Tensor& logits,
                               const Tensor& target_probs);

// mean over all elements of the stable binary cross-entropy with logits;
// targets in [0,1] are constants
Tensor bce_with_logits_mean(Tape& tape, const Tensor& logits, const Tensor& targets);

// [n,n] -> [n,n-1] dropping the diagonal of each row
Tensor exclude_diag(Tape& tape, const Tensor& x);

// ---------------------------------------------------------------------------
// raw kernels (no tape); exposed for optimizer and tests
// ---------------------------------------------------------------------------
namespace kernels {
// C (+)= A.B with optional accumulate; all row-major
void sgemm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);
void sgemm_nt(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);
void sgemm_tn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);
}  // namespace kernels

}  // namespace embedkit
