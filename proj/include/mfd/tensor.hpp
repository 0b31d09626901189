#pragma once

// Dense 64-bit float tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto shared storage (shape + row-major data +
// optional gradient buffer). Operations record backward closures onto the
// thread-local current Tape when one is installed via TapeScope; without a
// tape, every op is a pure forward computation. A Tape and the tensors built
// under it are confined to one thread; parameter tensors may be shared
// read-only across threads.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "mfd/rng.hpp"

namespace mfd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches it
  bool requires_grad = false;
};

void ensure_grad(Storage& st);

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, double fill, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  // Fan-in style init: uniform(-bound, bound).
  static Tensor uniform(Shape shape, double bound, Rng& rng, bool requires_grad = false);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  std::size_t rank() const { return st_->shape.size(); }
  std::size_t size() const { return st_->data.size(); }

  const std::vector<double>& values() const { return st_->data; }
  // Direct mutation is for leaf setup (parameter loading, optimizer steps),
  // never for tensors participating in a live tape.
  std::vector<double>& mutable_values() { return st_->data; }

  double at(std::initializer_list<std::size_t> idx) const;
  double item() const;

  bool requires_grad() const { return st_->requires_grad; }
  void set_requires_grad(bool v) { st_->requires_grad = v; }

  bool has_grad() const { return st_ && !st_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  // Deep copy; the copy never requires grad.
  Tensor clone() const;

  bool all_finite() const;

  const std::shared_ptr<detail::Storage>& storage() const { return st_; }

 private:
  std::shared_ptr<detail::Storage> st_;
};

// Reverse-mode tape: operations append backward closures in execution order,
// so walking the list in reverse is a valid topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_step);

  // Seeds d(output)=1 and runs every recorded step in reverse. Each tape may
  // run backward exactly once; gradients accumulate additively into every
  // requires_grad tensor reached.
  void backward(const Tensor& scalar_output);

  std::size_t size() const { return steps_.size(); }
  bool used() const { return used_; }

  static Tape* current();

 private:
  friend class TapeScope;
  std::vector<std::function<void()>> steps_;
  bool used_ = false;
};

// RAII installer of the thread-local current tape.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Suspends recording: ops run as pure forward computations inside this scope.
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* prev_;
};

enum class Padding { same, valid };

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a / b with 0 substituted where |b| <= tiny (and no gradient there).
Tensor safe_div(const Tensor& a, const Tensor& b, double tiny = 1e-12);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

// ---- reductions / shape ----
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor reduce_sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor reduce_mean(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor reduce_max(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);
// Broadcast a [1 x C] (or [C]) tensor to [rows x C].
Tensor repeat_rows(const Tensor& x, std::size_t rows);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T -> [m,n]
Tensor add_bias(const Tensor& x, const Tensor& bias);  // rows + bias[C]

// ---- convolution / pooling (input layout [T, F, C] or [L, C]) ----
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Padding padding);
Tensor conv1d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Padding padding);
Tensor avg_pool2d(const Tensor& x, std::size_t pool_t, std::size_t pool_f);
Tensor max_pool2d(const Tensor& x, std::size_t pool_t, std::size_t pool_f);

// Unfold [T,F,C] into patch rows [T'*F', C*k*k] (column order c-major, then
// kernel row, then kernel col). Gradient scatters back through col2im.
Tensor im2col(const Tensor& x, std::size_t k, Padding padding);

// Multiply column block c (of width `group`) of every row (t,f) by
// gate[f, c]; rows are laid out t-major with `freq_bins` frequencies.
Tensor scale_freq_groups(const Tensor& m, const Tensor& gate, std::size_t freq_bins,
                         std::size_t group);

// out[r, :] = sum_i weights[r % freq_bins, i] * parts[i][r, :]
Tensor mix_over_banks(const std::vector<Tensor>& parts, const Tensor& weights,
                      std::size_t freq_bins);

// out = sum_i weights[i] * x[i, ...] collapsing the first axis.
Tensor blend_first_axis(const Tensor& x, const Tensor& weights);

// Multiply along one axis by a gate vector of matching length.
Tensor scale_axis(const Tensor& x, std::size_t axis, const Tensor& gate);

// ---- normalization ----
// Per-channel batch norm over the last axis; running stats are plain tensors
// updated in place during training with the given momentum.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, double momentum, double eps,
                  bool training);

// ---- losses (targets and weights are constants; gradient flows into pred) ----
// sum_i weights[i] * bce(targets[i], clamp(pred[i])) / normalizer
Tensor bce_loss(const Tensor& pred, const Tensor& targets, const Tensor& weights,
                double normalizer, double clamp_eps = 1e-7);
Tensor mse_loss(const Tensor& pred, const Tensor& target, double normalizer);

// ---- recurrent ----
struct GruParams {
  // Gate weight layout: x_t [1,d_in] * w + h [1,d_h] * u + b.
  Tensor update_w, update_u, update_b;
  Tensor reset_w, reset_u, reset_b;
  Tensor cand_w, cand_u, cand_b;

  static GruParams init(std::size_t d_in, std::size_t d_hidden, Rng& rng);
  std::size_t hidden_size() const { return update_b.shape()[1]; }
};

// Unidirectional GRU over [T, d_in] -> [T, d_hidden], composed from primitive
// ops so gradients flow through the tape. reverse_time runs t = T-1..0 while
// emitting outputs in input order.
Tensor gru_forward(const Tensor& input, const GruParams& params, bool reverse_time = false);
// Bidirectional: concat of forward and time-reversed passes, [T, 2*d_hidden].
Tensor bigru_forward(const Tensor& input, const GruParams& fwd, const GruParams& bwd);

// ---- verification ----
// Central finite differences against tape gradients for a scalar-valued f.
// Returns the max over coordinates of |fd - tape| / max(|fd|, |tape|, 1e-8).
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           double eps);

}  // namespace mfd
