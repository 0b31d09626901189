#include "mfd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mfd {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

void ensure_grad(Storage& st) {
  if (st.grad.size() != st.data.size()) st.grad.assign(st.data.size(), 0.0);
}

}  // namespace detail

namespace {

using detail::Storage;

void accumulate(const std::shared_ptr<Storage>& st, const std::vector<double>& g) {
  detail::ensure_grad(*st);
  for (std::size_t i = 0; i < g.size(); ++i) st->grad[i] += g[i];
}

// Output gradient of a recorded op; empty when the op never reached the loss.
const std::vector<double>* out_grad(const std::shared_ptr<Storage>& st) {
  return st->grad.empty() ? nullptr : &st->grad;
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for shape " +
                                shape_str(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  st_ = std::make_shared<Storage>();
  st_->shape = std::move(shape);
  st_->data.assign(shape_numel(st_->shape), fill);
  st_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  if (values.size() != n)
    throw std::invalid_argument("tensor " + shape_str(shape) + " needs " + std::to_string(n) +
                                " values, got " + std::to_string(values.size()));
  st_ = std::make_shared<Storage>();
  st_->shape = std::move(shape);
  st_->data = std::move(values);
  st_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return Tensor(std::move(shape), value, requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, {value}); }

Tensor Tensor::uniform(Shape shape, double bound, Rng& rng, bool requires_grad) {
  Tensor t(std::move(shape), 0.0, requires_grad);
  for (double& v : t.st_->data) v = rng.uniform(-bound, bound);
  return t;
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != rank()) throw std::invalid_argument("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t k = 0;
  for (std::size_t i : idx) {
    if (i >= st_->shape[k]) throw std::out_of_range("at(): index out of range");
    flat = flat * st_->shape[k] + i;
    ++k;
  }
  return st_->data[flat];
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(size()) +
                                               " elements, expected 1");
  return st_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("grad(): no gradient buffer present");
  return st_->grad;
}

void Tensor::zero_grad() {
  if (st_ && !st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t;
  t.st_ = std::make_shared<Storage>();
  t.st_->shape = st_->shape;
  t.st_->data = st_->data;
  t.st_->requires_grad = false;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : st_->data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> backward_step) {
  steps_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& scalar_output) {
  if (used_) throw std::logic_error("Tape::backward called twice");
  if (scalar_output.size() != 1)
    throw std::invalid_argument("Tape::backward expects a scalar output");
  if (!scalar_output.requires_grad())
    throw std::invalid_argument("Tape::backward: output does not require grad");
  used_ = true;
  auto st = scalar_output.storage();
  detail::ensure_grad(*st);
  st->grad[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

TapeScope::TapeScope(Tape& tape) : prev_(g_current_tape) { g_current_tape = &tape; }

TapeScope::~TapeScope() { g_current_tape = prev_; }

NoTapeScope::NoTapeScope() : prev_(g_current_tape) { g_current_tape = nullptr; }

NoTapeScope::~NoTapeScope() { g_current_tape = prev_; }

namespace {

// Shared boilerplate: decide whether to track, and record if so.
bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current()) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void record(std::function<void()> fn) { Tape::current()->record(std::move(fn)); }

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const bool track = tracking({&a, &b});
  Tensor y(a.shape(), std::move(out), track);
  if (track) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    record([as, bs, ys] {
      const auto* g = out_grad(ys);
      if (!g) return;
      if (as->requires_grad) accumulate(as, *g);
      if (bs->requires_grad) accumulate(bs, *g);
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const bool track = tracking({&a, &b});
  Tensor y(a.shape(), std::move(out), track);
  if (track) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    record([as, bs, ys] {
      const auto* g = out_grad(ys);
      if (!g) return;
      if (as->requires_grad) accumulate(as, *g);
      if (bs->requires_grad) {
        detail::ensure_grad(*bs);
        for (std::size_t i = 0; i < g->size(); ++i) bs->grad[i] -= (*g)[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const bool track = tracking({&a, &b});
  Tensor y(a.shape(), std::move(out), track);
  if (track) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    record([as, bs, ys] {
      const auto* g = out_grad(ys);
      if (!g) return;
      if (as->requires_grad) {
        detail::ensure_grad(*as);
        for (std::size_t i = 0; i < g->size(); ++i) as->grad[i] += bs->data[i] * (*g)[i];
      }
      if (bs->requires_grad) {
        detail::ensure_grad(*bs);
        for (std::size_t i = 0; i < g->size(); ++i) bs->grad[i] += as->data[i] * (*g)[i];
      }
    });
  }
  return y;
}

Tensor safe_div(const Tensor& a, const Tensor& b, double tiny) {
  require_same_shape(a, b, "safe_div");
  std::vector<double> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (std::fabs(bv[i]) > tiny) ? av[i] / bv[i] : 0.0;
  const bool track = tracking({&a, &b});
  Tensor y(a.shape(), std::move(out), track);
  if (track) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    record([as, bs, ys, tiny] {
      const auto* g = out_grad(ys);
      if (!g) return;
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double bb = bs->data[i];
        if (std::fabs(bb) <= tiny) continue;
        if (as->requires_grad) {
          detail::ensure_grad(*as);
          as->grad[i] += (*g)[i] / bb;
        }
        if (bs->requires_grad) {
          detail::ensure_grad(*bs);
          bs->grad[i] += -(*g)[i] * as->data[i] / (bb * bb);
        }
      }
    });
  }
  return y;
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  const bool track = tracking({&a});
  Tensor y(a.shape(), std::move(out), track);
  if (track) {
    auto as = a.storage(), ys = y.storage();
    record([as, ys] {
      const auto* g = out_grad(ys);
      if (g && as->requires_grad) accumulate(as, *g);
    });
  }
  return y;
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  const bool track = tracking({&a});
  Tensor y(a.shape(), std::move(out), track);
  if (track) {
    auto as = a.storage(), ys = y.storage();
    record([as, ys, c] {
      const auto* g = out_grad(ys);
      if (!g || !as->requires_grad) return;
      detail::ensure_grad(*as);
      for (std::size_t i = 0; i < g->size(); ++i) as->grad[i] += c * (*g)[i];
    });
  }
  return y;
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const bool track = tracking({&x});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    record([xs, ys] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      detail::ensure_grad(*xs);
      for (std::size_t i = 0; i < g->size(); ++i)
        if (xs->data[i] > 0.0) xs->grad[i] += (*g)[i];
    });
  }
  return y;
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  const bool track = tracking({&x});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    record([xs, ys] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      detail::ensure_grad(*xs);
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double s = ys->data[i];
        xs->grad[i] += s * (1.0 - s) * (*g)[i];
      }
    });
  }
  return y;
}

Tensor tanh_op(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  const bool track = tracking({&x});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    record([xs, ys] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      detail::ensure_grad(*xs);
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double t = ys->data[i];
        xs->grad[i] += (1.0 - t * t) * (*g)[i];
      }
    });
  }
  return y;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, xv[i]));
  const bool track = tracking({&x});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    record([xs, ys, lo, hi] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      detail::ensure_grad(*xs);
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double v = xs->data[i];
        if (v > lo && v < hi) xs->grad[i] += (*g)[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.n * s.inner + j;
      double mx = -1e308;
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, xv[base + i * s.inner]);
      double sum = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const double e = std::exp(xv[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= sum;
    }
  }
  const bool track = tracking({&x});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    record([xs, ys, s] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      detail::ensure_grad(*xs);
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t base = o * s.n * s.inner + j;
          double dot = 0.0;
          for (std::size_t i = 0; i < s.n; ++i) {
            const std::size_t k = base + i * s.inner;
            dot += (*g)[k] * ys->data[k];
          }
          for (std::size_t i = 0; i < s.n; ++i) {
            const std::size_t k = base + i * s.inner;
            xs->grad[k] += ys->data[k] * ((*g)[k] - dot);
          }
        }
      }
    });
  }
  return y;
}

namespace {

Shape reduced_shape(const Shape& in, std::size_t axis, bool keepdim) {
  Shape out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (i == axis) {
      if (keepdim) out.push_back(1);
    } else {
      out.push_back(in[i]);
    }
  }
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

Tensor reduce_sum(const Tensor& x, std::size_t axis, bool keepdim) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.n; ++i)
      for (std::size_t j = 0; j < s.inner; ++j)
        out[o * s.inner + j] += xv[(o * s.n + i) * s.inner + j];
  const bool track = tracking({&x});
  Tensor y(reduced_shape(x.shape(), axis, keepdim), std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    record([xs, ys, s] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      detail::ensure_grad(*xs);
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.n; ++i)
          for (std::size_t j = 0; j < s.inner; ++j)
            xs->grad[(o * s.n + i) * s.inner + j] += (*g)[o * s.inner + j];
    });
  }
  return y;
}

Tensor reduce_mean(const Tensor& x, std::size_t axis, bool keepdim) {
  const std::size_t n = x.shape()[axis];
  return scale(reduce_sum(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor reduce_max(const Tensor& x, std::size_t axis, bool keepdim) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(s.outer * s.inner);
  auto argmax = std::make_shared<std::vector<std::size_t>>(s.outer * s.inner);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.inner; ++j) {
      double best = xv[(o * s.n) * s.inner + j];
      std::size_t bi = 0;
      for (std::size_t i = 1; i < s.n; ++i) {
        const double v = xv[(o * s.n + i) * s.inner + j];
        if (v > best) {
          best = v;
          bi = i;
        }
      }
      out[o * s.inner + j] = best;
      (*argmax)[o * s.inner + j] = bi;
    }
  }
  const bool track = tracking({&x});
  Tensor y(reduced_shape(x.shape(), axis, keepdim), std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    record([xs, ys, s, argmax] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      detail::ensure_grad(*xs);
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t k = o * s.inner + j;
          xs->grad[(o * s.n + (*argmax)[k]) * s.inner + j] += (*g)[k];
        }
    });
  }
  return y;
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const bool track = tracking({&x});
  Tensor y(Shape{1}, {acc});
  y.set_requires_grad(track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    record([xs, ys] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      detail::ensure_grad(*xs);
      for (double& gv : xs->grad) gv += (*g)[0];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(new_shape));
  const bool track = tracking({&x});
  Tensor y(std::move(new_shape), x.values(), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    record([xs, ys] {
      const auto* g = out_grad(ys);
      if (g && xs->requires_grad) accumulate(xs, *g);
    });
  }
  return y;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& ref = parts[0].shape();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != ref.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.shape()[i] != ref[i])
        throw std::invalid_argument("concat: shape mismatch on non-concat axis");
    total += p.shape()[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const AxisSplit so = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t np = p.shape()[axis];
    const auto& pv = p.values();
    for (std::size_t o = 0; o < so.outer; ++o) {
      const double* src = pv.data() + o * np * so.inner;
      double* dst = out.data() + (o * so.n + offset) * so.inner;
      std::copy(src, src + np * so.inner, dst);
    }
    offset += np;
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  const bool track = Tape::current() && any;
  Tensor y(out_shape, std::move(out), track);
  if (track) {
    std::vector<std::shared_ptr<Storage>> srcs;
    std::vector<std::size_t> lens;
    for (const Tensor& p : parts) {
      srcs.push_back(p.storage());
      lens.push_back(p.shape()[axis]);
    }
    auto ys = y.storage();
    record([srcs, lens, ys, so] {
      const auto* g = out_grad(ys);
      if (!g) return;
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < srcs.size(); ++pi) {
        const std::size_t np = lens[pi];
        if (srcs[pi]->requires_grad) {
          detail::ensure_grad(*srcs[pi]);
          for (std::size_t o = 0; o < so.outer; ++o) {
            const double* gsrc = g->data() + (o * so.n + off) * so.inner;
            double* gdst = srcs[pi]->grad.data() + o * np * so.inner;
            for (std::size_t t = 0; t < np * so.inner; ++t) gdst[t] += gsrc[t];
          }
        }
        off += np;
      }
    });
  }
  return y;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (start + len > s.n)
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") exceeds axis size " +
                                std::to_string(s.n));
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  std::vector<double> out(shape_numel(out_shape));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* src = xv.data() + (o * s.n + start) * s.inner;
    std::copy(src, src + len * s.inner, out.data() + o * len * s.inner);
  }
  const bool track = tracking({&x});
  Tensor y(out_shape, std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    record([xs, ys, s, start, len] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      detail::ensure_grad(*xs);
      for (std::size_t o = 0; o < s.outer; ++o) {
        const double* gsrc = g->data() + o * len * s.inner;
        double* gdst = xs->grad.data() + (o * s.n + start) * s.inner;
        for (std::size_t t = 0; t < len * s.inner; ++t) gdst[t] += gsrc[t];
      }
    });
  }
  return y;
}

Tensor repeat_rows(const Tensor& x, std::size_t rows) {
  const std::size_t c = x.size();
  if (!(x.rank() == 1 || (x.rank() == 2 && x.shape()[0] == 1)))
    throw std::invalid_argument("repeat_rows expects a [C] or [1xC] tensor");
  std::vector<double> out(rows * c);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) std::copy(xv.begin(), xv.end(), out.begin() + r * c);
  const bool track = tracking({&x});
  Tensor y(Shape{rows, c}, std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    record([xs, ys, rows, c] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      detail::ensure_grad(*xs);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < c; ++i) xs->grad[i] += (*g)[r * c + i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " +
                                                 shape_str(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  const bool track = tracking({&a, &b});
  Tensor y(Shape{m, n}, std::move(out), track);
  if (track) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    record([as, bs, ys, m, k, n] {
      const auto* g = out_grad(ys);
      if (!g) return;
      if (as->requires_grad) {
        detail::ensure_grad(*as);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double* grow = g->data() + i * n;
            const double* brow = bs->data.data() + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            as->grad[i * k + p] += acc;
          }
      }
      if (bs->requires_grad) {
        detail::ensure_grad(*bs);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = as->data[i * k + p];
            if (aip == 0.0) continue;
            const double* grow = g->data() + i * n;
            double* brow = bs->grad.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
          }
      }
    });
  }
  return y;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t n = b.shape()[0], k2 = b.shape()[1];
  if (k != k2)
    throw std::invalid_argument("matmul_nt: inner dimensions disagree " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()) + "^T");
  std::vector<double> out(m * n);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = av + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = bv + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * n + j] = acc;
    }
  }
  const bool track = tracking({&a, &b});
  Tensor y(Shape{m, n}, std::move(out), track);
  if (track) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    record([as, bs, ys, m, k, n] {
      const auto* g = out_grad(ys);
      if (!g) return;
      if (as->requires_grad) {
        detail::ensure_grad(*as);
        for (std::size_t i = 0; i < m; ++i) {
          double* arow = as->grad.data() + i * k;
          const double* grow = g->data() + i * n;
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = grow[j];
            if (gij == 0.0) continue;
            const double* brow = bs->data.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) arow[p] += gij * brow[p];
          }
        }
      }
      if (bs->requires_grad) {
        detail::ensure_grad(*bs);
        for (std::size_t i = 0; i < m; ++i) {
          const double* arow = as->data.data() + i * k;
          const double* grow = g->data() + i * n;
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = grow[j];
            if (gij == 0.0) continue;
            double* brow = bs->grad.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) brow[p] += gij * arow[p];
          }
        }
      }
    });
  }
  return y;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 1) throw std::invalid_argument("add_bias: scalar input");
  const std::size_t c = x.shape().back();
  if (bias.size() != c)
    throw std::invalid_argument("add_bias: bias size " + std::to_string(bias.size()) +
                                " does not match channel count " + std::to_string(c));
  const std::size_t rows = x.size() / c;
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  const auto& bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < c; ++i) out[r * c + i] = xv[r * c + i] + bv[i];
  const bool track = tracking({&x, &bias});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    auto xs = x.storage(), bs = bias.storage(), ys = y.storage();
    record([xs, bs, ys, rows, c] {
      const auto* g = out_grad(ys);
      if (!g) return;
      if (xs->requires_grad) accumulate(xs, *g);
      if (bs->requires_grad) {
        detail::ensure_grad(*bs);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < c; ++i) bs->grad[i] += (*g)[r * c + i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// batch norm (channel = last axis)
// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, double momentum, double eps, bool training) {
  const std::size_t c = x.shape().back();
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c ||
      running_var.size() != c)
    throw std::invalid_argument("batch_norm: per-channel parameter size mismatch (channels " +
                                std::to_string(c) + ")");
  const std::size_t rows = x.size() / c;
  const auto& xv = x.values();

  std::vector<double> mean(c, 0.0), var(c, 0.0);
  if (training) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < c; ++i) mean[i] += xv[r * c + i];
    for (std::size_t i = 0; i < c; ++i) mean[i] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < c; ++i) {
        const double d = xv[r * c + i] - mean[i];
        var[i] += d * d;
      }
    for (std::size_t i = 0; i < c; ++i) var[i] /= static_cast<double>(rows);
    auto& rm = running_mean.mutable_values();
    auto& rv = running_var.mutable_values();
    for (std::size_t i = 0; i < c; ++i) {
      rm[i] = momentum * rm[i] + (1.0 - momentum) * mean[i];
      rv[i] = momentum * rv[i] + (1.0 - momentum) * var[i];
    }
  } else {
    mean = running_mean.values();
    var = running_var.values();
  }

  auto invstd = std::make_shared<std::vector<double>>(c);
  for (std::size_t i = 0; i < c; ++i) (*invstd)[i] = 1.0 / std::sqrt(var[i] + eps);

  auto xhat = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < c; ++i) {
      const double xn = (xv[r * c + i] - mean[i]) * (*invstd)[i];
      (*xhat)[r * c + i] = xn;
      out[r * c + i] = xn * gv[i] + bv[i];
    }

  const bool track = tracking({&x, &gamma, &beta});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), ys = y.storage();
    record([xs, gs, bs, ys, xhat, invstd, rows, c, training] {
      const auto* g = out_grad(ys);
      if (!g) return;
      std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < c; ++i) {
          const double dy = (*g)[r * c + i];
          sum_dy[i] += dy;
          sum_dy_xhat[i] += dy * (*xhat)[r * c + i];
        }
      if (bs->requires_grad) accumulate(bs, sum_dy);
      if (gs->requires_grad) accumulate(gs, sum_dy_xhat);
      if (xs->requires_grad) {
        detail::ensure_grad(*xs);
        const double m = static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < c; ++i) {
            const std::size_t k = r * c + i;
            const double dy = (*g)[k];
            if (training) {
              xs->grad[k] += (gs->data[i] * (*invstd)[i] / m) *
                             (m * dy - sum_dy[i] - (*xhat)[k] * sum_dy_xhat[i]);
            } else {
              xs->grad[k] += gs->data[i] * (*invstd)[i] * dy;
            }
          }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Tensor bce_loss(const Tensor& pred, const Tensor& targets, const Tensor& weights,
                double normalizer, double clamp_eps) {
  require_same_shape(pred, targets, "bce_loss");
  require_same_shape(pred, weights, "bce_loss");
  if (!(normalizer > 0.0)) throw std::invalid_argument("bce_loss: normalizer must be positive");
  const auto& pv = pred.values();
  const auto& tv = targets.values();
  const auto& wv = weights.values();
  const double lo = clamp_eps, hi = 1.0 - clamp_eps;
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (wv[i] == 0.0) continue;
    const double p = std::min(hi, std::max(lo, pv[i]));
    acc += wv[i] * (-tv[i] * std::log(p) - (1.0 - tv[i]) * std::log(1.0 - p));
  }
  const bool track = tracking({&pred});
  Tensor y(Shape{1}, {acc / normalizer});
  y.set_requires_grad(track);
  if (track) {
    auto ps = pred.storage(), ts = targets.storage(), ws = weights.storage(), ys = y.storage();
    record([ps, ts, ws, ys, normalizer, lo, hi] {
      const auto* g = out_grad(ys);
      if (!g || !ps->requires_grad) return;
      detail::ensure_grad(*ps);
      const double gy = (*g)[0] / normalizer;
      for (std::size_t i = 0; i < ps->data.size(); ++i) {
        const double w = ws->data[i];
        if (w == 0.0) continue;
        const double raw = ps->data[i];
        if (raw <= lo || raw >= hi) continue;  // clamped region, flat
        ps->grad[i] += gy * w * (raw - ts->data[i]) / (raw * (1.0 - raw));
      }
    });
  }
  return y;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target, double normalizer) {
  require_same_shape(pred, target, "mse_loss");
  if (!(normalizer > 0.0)) throw std::invalid_argument("mse_loss: normalizer must be positive");
  const auto& pv = pred.values();
  const auto& tv = target.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double d = pv[i] - tv[i];
    acc += d * d;
  }
  const bool track = tracking({&pred});
  Tensor y(Shape{1}, {acc / normalizer});
  y.set_requires_grad(track);
  if (track) {
    auto ps = pred.storage(), ts = target.storage(), ys = y.storage();
    record([ps, ts, ys, normalizer] {
      const auto* g = out_grad(ys);
      if (!g || !ps->requires_grad) return;
      detail::ensure_grad(*ps);
      const double gy = (*g)[0] / normalizer;
      for (std::size_t i = 0; i < ps->data.size(); ++i)
        ps->grad[i] += gy * 2.0 * (ps->data[i] - ts->data[i]);
    });
  }
  return y;
}

}  // namespace mfd
