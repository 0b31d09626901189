#include <cmath>
#include <stdexcept>

#include "mfd/tensor.hpp"

namespace mfd {

GruParams GruParams::init(std::size_t d_in, std::size_t d_hidden, Rng& rng) {
  const double sx = std::sqrt(1.0 / static_cast<double>(d_in));
  const double sh = std::sqrt(1.0 / static_cast<double>(d_hidden));
  GruParams p;
  p.update_w = Tensor::uniform({d_in, d_hidden}, sx, rng, true);
  p.update_u = Tensor::uniform({d_hidden, d_hidden}, sh, rng, true);
  p.update_b = Tensor::zeros({1, d_hidden}, true);
  p.reset_w = Tensor::uniform({d_in, d_hidden}, sx, rng, true);
  p.reset_u = Tensor::uniform({d_hidden, d_hidden}, sh, rng, true);
  p.reset_b = Tensor::zeros({1, d_hidden}, true);
  p.cand_w = Tensor::uniform({d_in, d_hidden}, sx, rng, true);
  p.cand_u = Tensor::uniform({d_hidden, d_hidden}, sh, rng, true);
  p.cand_b = Tensor::zeros({1, d_hidden}, true);
  return p;
}

// h_t = (1 - z) * h_{t-1} + z * cand, with cand gated by the reset signal.
// Zero input with zero parameters is a fixed point of the zero state.
Tensor gru_forward(const Tensor& input, const GruParams& params, bool reverse_time) {
  if (input.rank() != 2)
    throw std::invalid_argument("gru_forward: expected [T,d_in] input, got " +
                                shape_str(input.shape()));
  const std::size_t t_len = input.shape()[0];
  if (t_len == 0) throw std::invalid_argument("gru_forward: empty sequence");
  if (input.shape()[1] != params.update_w.shape()[0])
    throw std::invalid_argument("gru_forward: input width " + std::to_string(input.shape()[1]) +
                                " does not match parameters (" +
                                std::to_string(params.update_w.shape()[0]) + ")");
  const std::size_t hidden = params.hidden_size();

  Tensor h = Tensor::zeros({1, hidden});
  std::vector<Tensor> outputs(t_len);
  for (std::size_t step = 0; step < t_len; ++step) {
    const std::size_t t = reverse_time ? t_len - 1 - step : step;
    Tensor xt = slice(input, 0, t, 1);
    Tensor z = sigmoid(add(add(matmul(xt, params.update_w), matmul(h, params.update_u)),
                           params.update_b));
    Tensor r = sigmoid(add(add(matmul(xt, params.reset_w), matmul(h, params.reset_u)),
                           params.reset_b));
    Tensor cand = tanh_op(add(add(matmul(xt, params.cand_w), matmul(mul(r, h), params.cand_u)),
                              params.cand_b));
    Tensor keep = add_scalar(scale(z, -1.0), 1.0);
    h = add(mul(keep, h), mul(z, cand));
    outputs[t] = h;
  }
  return concat(outputs, 0);
}

Tensor bigru_forward(const Tensor& input, const GruParams& fwd, const GruParams& bwd) {
  Tensor a = gru_forward(input, fwd, false);
  Tensor b = gru_forward(input, bwd, true);
  return concat({a, b}, 1);
}

}  // namespace mfd
