#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "mfd/tensor.hpp"

namespace mfd {

namespace {

using detail::Storage;
using detail::ensure_grad;

bool tracking2(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current()) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

const std::vector<double>* out_grad(const std::shared_ptr<Storage>& st) {
  return st->grad.empty() ? nullptr : &st->grad;
}

void check_odd_kernel(std::size_t k, const char* op) {
  if (k % 2 == 0)
    throw std::invalid_argument(std::string(op) + ": kernel size " + std::to_string(k) +
                                " must be odd");
}

}  // namespace

// ---------------------------------------------------------------------------
// im2col / conv2d
// ---------------------------------------------------------------------------

Tensor im2col(const Tensor& x, std::size_t k, Padding padding) {
  if (x.rank() != 3)
    throw std::invalid_argument("im2col: expected [T,F,C] input, got " + shape_str(x.shape()));
  check_odd_kernel(k, "im2col");
  const std::size_t t_in = x.shape()[0], f_in = x.shape()[1], c = x.shape()[2];
  const std::size_t pad = (padding == Padding::same) ? (k - 1) / 2 : 0;
  std::size_t t_out, f_out;
  if (padding == Padding::same) {
    t_out = t_in;
    f_out = f_in;
  } else {
    if (t_in < k || f_in < k)
      throw std::invalid_argument("im2col: input " + shape_str(x.shape()) +
                                  " smaller than valid-padding window " + std::to_string(k));
    t_out = t_in - k + 1;
    f_out = f_in - k + 1;
  }
  const std::size_t cols = c * k * k;
  std::vector<double> out(t_out * f_out * cols, 0.0);
  const auto& xv = x.values();
  for (std::size_t to = 0; to < t_out; ++to) {
    for (std::size_t fo = 0; fo < f_out; ++fo) {
      double* row = out.data() + (to * f_out + fo) * cols;
      for (std::size_t a = 0; a < k; ++a) {
        const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(to + a) - static_cast<std::ptrdiff_t>(pad);
        if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(t_in)) continue;
        for (std::size_t b = 0; b < k; ++b) {
          const std::ptrdiff_t fi = static_cast<std::ptrdiff_t>(fo + b) - static_cast<std::ptrdiff_t>(pad);
          if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(f_in)) continue;
          const double* src = xv.data() + (static_cast<std::size_t>(ti) * f_in + static_cast<std::size_t>(fi)) * c;
          for (std::size_t ci = 0; ci < c; ++ci) row[(ci * k + a) * k + b] = src[ci];
        }
      }
    }
  }
  const bool track = tracking2({&x});
  Tensor y(Shape{t_out * f_out, cols}, std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    Tape::current()->record([xs, ys, t_in, f_in, c, k, pad, t_out, f_out, cols] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      ensure_grad(*xs);
      for (std::size_t to = 0; to < t_out; ++to) {
        for (std::size_t fo = 0; fo < f_out; ++fo) {
          const double* grow = g->data() + (to * f_out + fo) * cols;
          for (std::size_t a = 0; a < k; ++a) {
            const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(to + a) - static_cast<std::ptrdiff_t>(pad);
            if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(t_in)) continue;
            for (std::size_t b = 0; b < k; ++b) {
              const std::ptrdiff_t fi = static_cast<std::ptrdiff_t>(fo + b) - static_cast<std::ptrdiff_t>(pad);
              if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(f_in)) continue;
              double* dst = xs->grad.data() +
                            (static_cast<std::size_t>(ti) * f_in + static_cast<std::size_t>(fi)) * c;
              for (std::size_t ci = 0; ci < c; ++ci) dst[ci] += grow[(ci * k + a) * k + b];
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Padding padding) {
  if (input.rank() != 3)
    throw std::invalid_argument("conv2d: expected [T,F,C_in] input, got " +
                                shape_str(input.shape()));
  if (kernel.rank() != 4)
    throw std::invalid_argument("conv2d: expected [C_out,C_in,k,k] kernel, got " +
                                shape_str(kernel.shape()));
  const std::size_t c_out = kernel.shape()[0], c_in = kernel.shape()[1];
  const std::size_t k = kernel.shape()[2];
  if (kernel.shape()[3] != k)
    throw std::invalid_argument("conv2d: kernel spatial dims must be square, got " +
                                shape_str(kernel.shape()));
  check_odd_kernel(k, "conv2d");
  if (input.shape()[2] != c_in)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(input.shape()[2]) +
                                " do not match kernel channels " + std::to_string(c_in));
  if (bias.size() != c_out)
    throw std::invalid_argument("conv2d: bias size " + std::to_string(bias.size()) +
                                " does not match output channels " + std::to_string(c_out));

  const std::size_t t_in = input.shape()[0], f_in = input.shape()[1];
  const std::size_t t_out = (padding == Padding::same) ? t_in : t_in - k + 1;
  const std::size_t f_out = (padding == Padding::same) ? f_in : f_in - k + 1;

  Tensor cols = im2col(input, k, padding);
  Tensor wm = reshape(kernel, Shape{c_out, c_in * k * k});
  Tensor flat = add_bias(matmul_nt(cols, wm), bias);
  return reshape(flat, Shape{t_out, f_out, c_out});
}

// ---------------------------------------------------------------------------
// conv1d over [L, C_in] with kernel [C_out, C_in, k]
// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Padding padding) {
  if (input.rank() != 2)
    throw std::invalid_argument("conv1d: expected [L,C_in] input, got " +
                                shape_str(input.shape()));
  if (kernel.rank() != 3)
    throw std::invalid_argument("conv1d: expected [C_out,C_in,k] kernel, got " +
                                shape_str(kernel.shape()));
  const std::size_t c_out = kernel.shape()[0], c_in = kernel.shape()[1], k = kernel.shape()[2];
  check_odd_kernel(k, "conv1d");
  if (input.shape()[1] != c_in)
    throw std::invalid_argument("conv1d: input channels " + std::to_string(input.shape()[1]) +
                                " do not match kernel channels " + std::to_string(c_in));
  if (bias.size() != c_out) throw std::invalid_argument("conv1d: bias/output channel mismatch");

  const std::size_t l_in = input.shape()[0];
  const std::size_t pad = (padding == Padding::same) ? (k - 1) / 2 : 0;
  std::size_t l_out;
  if (padding == Padding::same) {
    l_out = l_in;
  } else {
    if (l_in < k) throw std::invalid_argument("conv1d: input shorter than valid window");
    l_out = l_in - k + 1;
  }

  std::vector<double> out(l_out * c_out);
  const auto& xv = input.values();
  const auto& wv = kernel.values();
  const auto& bv = bias.values();
  for (std::size_t lo = 0; lo < l_out; ++lo) {
    for (std::size_t o = 0; o < c_out; ++o) {
      double acc = bv[o];
      for (std::size_t a = 0; a < k; ++a) {
        const std::ptrdiff_t li = static_cast<std::ptrdiff_t>(lo + a) - static_cast<std::ptrdiff_t>(pad);
        if (li < 0 || li >= static_cast<std::ptrdiff_t>(l_in)) continue;
        const double* xrow = xv.data() + static_cast<std::size_t>(li) * c_in;
        const double* wrow = wv.data() + (o * c_in) * k + a;
        for (std::size_t ci = 0; ci < c_in; ++ci) acc += xrow[ci] * wrow[ci * k];
      }
      out[lo * c_out + o] = acc;
    }
  }
  const bool track = tracking2({&input, &kernel, &bias});
  Tensor y(Shape{l_out, c_out}, std::move(out), track);
  if (track) {
    auto xs = input.storage(), ws = kernel.storage(), bs = bias.storage(), ys = y.storage();
    Tape::current()->record([xs, ws, bs, ys, l_in, l_out, c_in, c_out, k, pad] {
      const auto* g = out_grad(ys);
      if (!g) return;
      if (bs->requires_grad) {
        ensure_grad(*bs);
        for (std::size_t lo = 0; lo < l_out; ++lo)
          for (std::size_t o = 0; o < c_out; ++o) bs->grad[o] += (*g)[lo * c_out + o];
      }
      if (xs->requires_grad) ensure_grad(*xs);
      if (ws->requires_grad) ensure_grad(*ws);
      if (!xs->requires_grad && !ws->requires_grad) return;
      for (std::size_t lo = 0; lo < l_out; ++lo) {
        for (std::size_t o = 0; o < c_out; ++o) {
          const double go = (*g)[lo * c_out + o];
          if (go == 0.0) continue;
          for (std::size_t a = 0; a < k; ++a) {
            const std::ptrdiff_t li = static_cast<std::ptrdiff_t>(lo + a) - static_cast<std::ptrdiff_t>(pad);
            if (li < 0 || li >= static_cast<std::ptrdiff_t>(l_in)) continue;
            for (std::size_t ci = 0; ci < c_in; ++ci) {
              const std::size_t xi = static_cast<std::size_t>(li) * c_in + ci;
              const std::size_t wi = (o * c_in + ci) * k + a;
              if (xs->requires_grad) xs->grad[xi] += ws->data[wi] * go;
              if (ws->requires_grad) ws->grad[wi] += xs->data[xi] * go;
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// pooling over [T, F, C]
// ---------------------------------------------------------------------------

namespace {

void check_pool_input(const Tensor& x, std::size_t pool_t, std::size_t pool_f, const char* op) {
  if (x.rank() != 3)
    throw std::invalid_argument(std::string(op) + ": expected [T,F,C] input, got " +
                                shape_str(x.shape()));
  if (pool_t == 0 || pool_f == 0)
    throw std::invalid_argument(std::string(op) + ": pool sizes must be >= 1");
  if (x.shape()[0] < pool_t || x.shape()[1] < pool_f)
    throw std::invalid_argument(std::string(op) + ": input " + shape_str(x.shape()) +
                                " smaller than pool window");
}

}  // namespace

Tensor avg_pool2d(const Tensor& x, std::size_t pool_t, std::size_t pool_f) {
  check_pool_input(x, pool_t, pool_f, "avg_pool2d");
  const std::size_t t_in = x.shape()[0], f_in = x.shape()[1], c = x.shape()[2];
  const std::size_t t_out = t_in / pool_t, f_out = f_in / pool_f;
  std::vector<double> out(t_out * f_out * c, 0.0);
  const auto& xv = x.values();
  const double inv = 1.0 / static_cast<double>(pool_t * pool_f);
  for (std::size_t to = 0; to < t_out; ++to)
    for (std::size_t fo = 0; fo < f_out; ++fo)
      for (std::size_t a = 0; a < pool_t; ++a)
        for (std::size_t b = 0; b < pool_f; ++b) {
          const double* src = xv.data() + ((to * pool_t + a) * f_in + fo * pool_f + b) * c;
          double* dst = out.data() + (to * f_out + fo) * c;
          for (std::size_t ci = 0; ci < c; ++ci) dst[ci] += src[ci] * inv;
        }
  const bool track = tracking2({&x});
  Tensor y(Shape{t_out, f_out, c}, std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    Tape::current()->record([xs, ys, t_out, f_out, f_in, c, pool_t, pool_f, inv] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      ensure_grad(*xs);
      for (std::size_t to = 0; to < t_out; ++to)
        for (std::size_t fo = 0; fo < f_out; ++fo)
          for (std::size_t a = 0; a < pool_t; ++a)
            for (std::size_t b = 0; b < pool_f; ++b) {
              double* dst = xs->grad.data() + ((to * pool_t + a) * f_in + fo * pool_f + b) * c;
              const double* gsrc = g->data() + (to * f_out + fo) * c;
              for (std::size_t ci = 0; ci < c; ++ci) dst[ci] += gsrc[ci] * inv;
            }
    });
  }
  return y;
}

Tensor max_pool2d(const Tensor& x, std::size_t pool_t, std::size_t pool_f) {
  check_pool_input(x, pool_t, pool_f, "max_pool2d");
  const std::size_t t_in = x.shape()[0], f_in = x.shape()[1], c = x.shape()[2];
  const std::size_t t_out = t_in / pool_t, f_out = f_in / pool_f;
  std::vector<double> out(t_out * f_out * c);
  auto arg = std::make_shared<std::vector<std::size_t>>(t_out * f_out * c);
  const auto& xv = x.values();
  for (std::size_t to = 0; to < t_out; ++to)
    for (std::size_t fo = 0; fo < f_out; ++fo)
      for (std::size_t ci = 0; ci < c; ++ci) {
        double best = -1e308;
        std::size_t best_idx = 0;
        for (std::size_t a = 0; a < pool_t; ++a)
          for (std::size_t b = 0; b < pool_f; ++b) {
            const std::size_t idx = ((to * pool_t + a) * f_in + fo * pool_f + b) * c + ci;
            if (xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        const std::size_t k = (to * f_out + fo) * c + ci;
        out[k] = best;
        (*arg)[k] = best_idx;
      }
  const bool track = tracking2({&x});
  Tensor y(Shape{t_out, f_out, c}, std::move(out), track);
  if (track) {
    auto xs = x.storage(), ys = y.storage();
    Tape::current()->record([xs, ys, arg] {
      const auto* g = out_grad(ys);
      if (!g || !xs->requires_grad) return;
      ensure_grad(*xs);
      for (std::size_t i = 0; i < g->size(); ++i) xs->grad[(*arg)[i]] += (*g)[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// per-frequency kernel-space scaling (fused dynamic-conv path)
// ---------------------------------------------------------------------------

Tensor scale_freq_groups(const Tensor& m, const Tensor& gate, std::size_t freq_bins,
                         std::size_t group) {
  if (m.rank() != 2 || gate.rank() != 2)
    throw std::invalid_argument("scale_freq_groups: expected 2-D inputs");
  const std::size_t rows = m.shape()[0], width = m.shape()[1];
  const std::size_t gf = gate.shape()[0], gc = gate.shape()[1];
  if (gf != freq_bins)
    throw std::invalid_argument("scale_freq_groups: gate rows " + std::to_string(gf) +
                                " != freq bins " + std::to_string(freq_bins));
  if (rows % freq_bins != 0)
    throw std::invalid_argument("scale_freq_groups: row count not a multiple of freq bins");
  if (gc * group != width)
    throw std::invalid_argument("scale_freq_groups: gate channels * group != matrix width");

  std::vector<double> out(m.size());
  const auto& mv = m.values();
  const auto& gv = gate.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t f = r % freq_bins;
    const double* grow = gv.data() + f * gc;
    const double* src = mv.data() + r * width;
    double* dst = out.data() + r * width;
    for (std::size_t ch = 0; ch < gc; ++ch) {
      const double s = grow[ch];
      for (std::size_t j = 0; j < group; ++j) dst[ch * group + j] = src[ch * group + j] * s;
    }
  }
  const bool track = tracking2({&m, &gate});
  Tensor y(m.shape(), std::move(out), track);
  if (track) {
    auto ms = m.storage(), gs = gate.storage(), ys = y.storage();
    Tape::current()->record([ms, gs, ys, rows, width, freq_bins, gc, group] {
      const auto* g = out_grad(ys);
      if (!g) return;
      if (ms->requires_grad) ensure_grad(*ms);
      if (gs->requires_grad) ensure_grad(*gs);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t f = r % freq_bins;
        const double* grow = g->data() + r * width;
        for (std::size_t ch = 0; ch < gc; ++ch) {
          const double s = gs->data[f * gc + ch];
          for (std::size_t j = 0; j < group; ++j) {
            const std::size_t col = ch * group + j;
            if (ms->requires_grad) ms->grad[r * width + col] += s * grow[col];
            if (gs->requires_grad)
              gs->grad[f * gc + ch] += ms->data[r * width + col] * grow[col];
          }
        }
      }
    });
  }
  return y;
}

Tensor mix_over_banks(const std::vector<Tensor>& parts, const Tensor& weights,
                      std::size_t freq_bins) {
  if (parts.empty()) throw std::invalid_argument("mix_over_banks: no inputs");
  const std::size_t n = parts.size();
  if (weights.rank() != 2 || weights.shape()[0] != freq_bins || weights.shape()[1] != n)
    throw std::invalid_argument("mix_over_banks: weights must be [F x n], got " +
                                shape_str(weights.shape()));
  const Shape& ps = parts[0].shape();
  if (ps.size() != 2 || ps[0] % freq_bins != 0)
    throw std::invalid_argument("mix_over_banks: parts must be [T*F x C]");
  for (const Tensor& p : parts)
    if (p.shape() != ps) throw std::invalid_argument("mix_over_banks: part shape mismatch");
  const std::size_t rows = ps[0], width = ps[1];

  std::vector<double> out(rows * width, 0.0);
  const auto& wv = weights.values();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pv = parts[i].values();
    for (std::size_t r = 0; r < rows; ++r) {
      const double w = wv[(r % freq_bins) * n + i];
      const double* src = pv.data() + r * width;
      double* dst = out.data() + r * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += w * src[j];
    }
  }
  bool any = weights.requires_grad();
  for (const Tensor& p : parts) any = any || p.requires_grad();
  const bool track = Tape::current() && any;
  Tensor y(ps, std::move(out), track);
  if (track) {
    std::vector<std::shared_ptr<Storage>> pss;
    pss.reserve(n);
    for (const Tensor& p : parts) pss.push_back(p.storage());
    auto ws = weights.storage(), ys = y.storage();
    Tape::current()->record([pss, ws, ys, rows, width, freq_bins, n] {
      const auto* g = out_grad(ys);
      if (!g) return;
      for (std::size_t i = 0; i < n; ++i) {
        auto& p = pss[i];
        const bool pg = p->requires_grad;
        const bool wg = ws->requires_grad;
        if (pg) ensure_grad(*p);
        if (wg) ensure_grad(*ws);
        if (!pg && !wg) continue;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t f = r % freq_bins;
          const double w = ws->data[f * n + i];
          const double* grow = g->data() + r * width;
          double acc = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            if (pg) p->grad[r * width + j] += w * grow[j];
            acc += p->data[r * width + j] * grow[j];
          }
          if (wg) ws->grad[f * n + i] += acc;
        }
      }
    });
  }
  return y;
}

Tensor blend_first_axis(const Tensor& x, const Tensor& weights) {
  if (x.rank() < 2) throw std::invalid_argument("blend_first_axis: need rank >= 2");
  const std::size_t n = x.shape()[0];
  if (weights.size() != n)
    throw std::invalid_argument("blend_first_axis: weight count " +
                                std::to_string(weights.size()) + " != first axis " +
                                std::to_string(n));
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t block = shape_numel(out_shape);
  std::vector<double> out(block, 0.0);
  const auto& xv = x.values();
  const auto& wv = weights.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double w = wv[i];
    const double* src = xv.data() + i * block;
    for (std::size_t j = 0; j < block; ++j) out[j] += w * src[j];
  }
  const bool track = tracking2({&x, &weights});
  Tensor y(out_shape, std::move(out), track);
  if (track) {
    auto xs = x.storage(), ws = weights.storage(), ys = y.storage();
    Tape::current()->record([xs, ws, ys, n, block] {
      const auto* g = out_grad(ys);
      if (!g) return;
      if (xs->requires_grad) ensure_grad(*xs);
      if (ws->requires_grad) ensure_grad(*ws);
      for (std::size_t i = 0; i < n; ++i) {
        const double w = ws->data[i];
        double acc = 0.0;
        for (std::size_t j = 0; j < block; ++j) {
          if (xs->requires_grad) xs->grad[i * block + j] += w * (*g)[j];
          acc += xs->data[i * block + j] * (*g)[j];
        }
        if (ws->requires_grad) ws->grad[i] += acc;
      }
    });
  }
  return y;
}

Tensor scale_axis(const Tensor& x, std::size_t axis, const Tensor& gate) {
  if (axis >= x.rank()) throw std::invalid_argument("scale_axis: axis out of range");
  const std::size_t n = x.shape()[axis];
  if (gate.size() != n)
    throw std::invalid_argument("scale_axis: gate size " + std::to_string(gate.size()) +
                                " != axis length " + std::to_string(n));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  const auto& gv = gate.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i) {
      const double s = gv[i];
      const double* src = xv.data() + (o * n + i) * inner;
      double* dst = out.data() + (o * n + i) * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] = src[j] * s;
    }
  const bool track = tracking2({&x, &gate});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    auto xs = x.storage(), gs = gate.storage(), ys = y.storage();
    Tape::current()->record([xs, gs, ys, outer, n, inner] {
      const auto* g = out_grad(ys);
      if (!g) return;
      if (xs->requires_grad) ensure_grad(*xs);
      if (gs->requires_grad) ensure_grad(*gs);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < n; ++i) {
          const double s = gs->data[i];
          const std::size_t base = (o * n + i) * inner;
          double acc = 0.0;
          for (std::size_t j = 0; j < inner; ++j) {
            if (xs->requires_grad) xs->grad[base + j] += s * (*g)[base + j];
            acc += xs->data[base + j] * (*g)[base + j];
          }
          if (gs->requires_grad) gs->grad[i] += acc;
        }
    });
  }
  return y;
}

}  // namespace mfd
