#include <doctest.h>

#include <cmath>
#include <cstring>

#include "mfd/tensor.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mfd;
using testutil::max_abs_diff;
using testutil::random_tensor;
using testutil::random_tensor_nonzero;

namespace {

double check_op(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                double eps = 1e-4) {
  return grad_check(f, point, eps).max_rel_error;
}

}  // namespace

TEST_CASE("conv2d identity and zero kernels") {
  Tensor x({1, 1, 1}, {5.0});
  Tensor w({1, 1, 1, 1}, {1.0});
  Tensor b({1}, {0.0});
  Tensor y = conv2d(x, w, b, Padding::same);
  CHECK(y.shape() == Shape{1, 1, 1});
  CHECK(y.values()[0] == doctest::Approx(5.0).epsilon(1e-14));

  Rng rng(7);
  Tensor x2 = random_tensor({4, 5, 2}, rng);
  Tensor w0 = Tensor::zeros({3, 2, 3, 3});
  Tensor b2({3}, {0.25, -1.5, 2.0});
  Tensor y2 = conv2d(x2, w0, b2, Padding::same);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t f = 0; f < 5; ++f)
      for (std::size_t o = 0; o < 3; ++o)
        CHECK(y2.at({t, f, o}) == doctest::Approx(b2.values()[o]).epsilon(1e-15));
}

TEST_CASE("conv2d valid-padding window sum") {
  Tensor x = Tensor::ones({3, 3, 1});
  Tensor w = Tensor::ones({1, 1, 3, 3});
  Tensor b({1}, {0.0});
  Tensor y = conv2d(x, w, b, Padding::valid);
  CHECK(y.shape() == Shape{1, 1, 1});
  // Independent oracle: sum over the 3x3 window.
  auto ref = oracle::conv2d(x.values(), 3, 3, 1, w.values(), 1, 3, b.values(), false);
  CHECK(y.values()[0] == doctest::Approx(ref[0]).epsilon(1e-15));
  CHECK(ref[0] == doctest::Approx(9.0));
}

TEST_CASE("conv2d one-hot center tap reproduces input") {
  Rng rng(11);
  Tensor x = random_tensor({5, 6, 3}, rng);
  Tensor w = Tensor::zeros({3, 3, 3, 3});
  for (std::size_t o = 0; o < 3; ++o) w.mutable_values()[((o * 3 + o) * 3 + 1) * 3 + 1] = 1.0;
  Tensor b = Tensor::zeros({3});
  Tensor y = conv2d(x, w, b, Padding::same);
  CHECK(max_abs_diff(y.values(), x.values()) == 0.0);
}

TEST_CASE("conv2d matches scalar-loop oracle on random cases") {
  Rng rng(21);
  for (int rep = 0; rep < 5; ++rep) {
    const std::size_t T = 2 + rng.below(4), F = 2 + rng.below(4);
    const std::size_t C = 1 + rng.below(3), O = 1 + rng.below(3);
    const std::size_t k = (rng.uniform() < 0.5) ? 1 : 3;
    Tensor x = random_tensor({T, F, C}, rng);
    Tensor w = random_tensor({O, C, k, k}, rng);
    Tensor b = random_tensor({O}, rng);
    Tensor y = conv2d(x, w, b, Padding::same);
    auto ref = oracle::conv2d(x.values(), T, F, C, w.values(), O, k, b.values(), true);
    CHECK(max_abs_diff(y.values(), ref) < 1e-12);
    if (T >= k && F >= k) {
      Tensor yv = conv2d(x, w, b, Padding::valid);
      auto refv = oracle::conv2d(x.values(), T, F, C, w.values(), O, k, b.values(), false);
      CHECK(max_abs_diff(yv.values(), refv) < 1e-12);
    }
  }
}

TEST_CASE("conv2d rejects bad shapes") {
  Tensor x = Tensor::ones({3, 3, 2});
  Tensor b = Tensor::zeros({1});
  CHECK_THROWS_AS(conv2d(x, Tensor::ones({1, 2, 2, 2}), b, Padding::same), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(x, Tensor::ones({1, 3, 3, 3}), b, Padding::same), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(x, Tensor::ones({2, 2, 3, 3}), b, Padding::same), std::invalid_argument);
}

TEST_CASE("elementwise basics") {
  Tensor z({4}, {0.0, 0.0, 0.0, 0.0});
  Tensor s = softmax(z, 0);
  for (double v : s.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  CHECK(sigmoid(Tensor({1}, {0.0})).item() == doctest::Approx(0.5).epsilon(1e-15));

  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor p = matmul(a, eye);
  CHECK(max_abs_diff(p.values(), a.values()) == 0.0);

  CHECK_THROWS_AS(add(a, Tensor::ones({3})), std::invalid_argument);
  CHECK_THROWS_AS(matmul(a, Tensor::ones({3, 2})), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one and stay in (0,1)") {
  Rng rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor x = random_tensor({3, 7}, rng, -8.0, 8.0);
    Tensor y = softmax(x, 1);
    for (std::size_t r = 0; r < 3; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        const double v = y.at({r, c});
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        sum += v;
      }
      CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("grad_check closed-form cases") {
  Tensor p({3}, {0.3, -1.2, 2.0});
  auto r1 = grad_check([](const Tensor& x) { return sum_all(x); }, p, 1e-4);
  CHECK(r1.max_rel_error < 1e-9);

  Tensor p2({2}, {1.0, 2.0});
  Tensor x2 = p2.clone();
  x2.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = sum_all(mul(x2, x2));
    tape.backward(y);
  }
  CHECK(x2.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(x2.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));
  auto r2 = grad_check([](const Tensor& x) { return sum_all(mul(x, x)); }, p2, 1e-4);
  CHECK(r2.max_rel_error < 1e-6);

  CHECK_THROWS_AS(grad_check([](const Tensor& x) { return add_scalar(x, 1.0); }, p, 1e-4),
                  std::invalid_argument);
  CHECK_THROWS_AS(grad_check([](const Tensor& x) { return sum_all(x); }, p, 0.5),
                  std::invalid_argument);
}

TEST_CASE("gradients of primitive ops pass finite-difference checks") {
  Rng rng(33);
  auto weighted_sum = [&rng](const Tensor& t) {
    // Fixed random projection so every output coordinate matters.
    Rng r2(99);
    Tensor w = random_tensor(t.shape(), r2);
    return sum_all(mul(t, w));
  };

  for (int rep = 0; rep < 10; ++rep) {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor c = random_tensor({3, 4}, rng);
    CHECK(check_op([&](const Tensor& t) { return weighted_sum(add(t, c)); }, x) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return weighted_sum(sub(c, t)); }, x) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return weighted_sum(mul(t, c)); }, x) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return weighted_sum(sigmoid(t)); }, x) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return weighted_sum(tanh_op(t)); }, x) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return weighted_sum(softmax(t, 1)); }, x) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return weighted_sum(scale(t, -2.5)); }, x) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(reduce_mean(t, 0)); }, x) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(reduce_sum(t, 1)); }, x) < 1e-4);

    Tensor xr = random_tensor_nonzero({3, 4}, rng);
    CHECK(check_op([&](const Tensor& t) { return weighted_sum(relu(t)); }, xr) < 1e-4);
    Tensor denom = random_tensor_nonzero({3, 4}, rng, 0.2);
    CHECK(check_op([&](const Tensor& t) { return weighted_sum(safe_div(t, denom)); }, x) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return weighted_sum(safe_div(c, t)); }, denom) < 1e-4);

    Tensor m1 = random_tensor({3, 4}, rng);
    Tensor m2 = random_tensor({4, 2}, rng);
    CHECK(check_op([&](const Tensor& t) { return sum_all(matmul(t, m2)); }, m1) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(matmul(m1, t)); }, m2) < 1e-4);
    Tensor m3 = random_tensor({2, 4}, rng);
    CHECK(check_op([&](const Tensor& t) { return sum_all(matmul_nt(m1, t)); }, m3) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(matmul_nt(t, m3)); }, m1) < 1e-4);
  }
}

TEST_CASE("gradients of conv, pooling and shape ops") {
  Rng rng(44);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor x = random_tensor({4, 5, 2}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    CHECK(check_op([&](const Tensor& t) { return sum_all(conv2d(t, w, b, Padding::same)); }, x) <
          1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(conv2d(x, t, b, Padding::same)); }, w) <
          1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(conv2d(x, w, t, Padding::valid)); }, b) <
          1e-4);

    Tensor x1 = random_tensor({6, 3}, rng);
    Tensor w1 = random_tensor({2, 3, 3}, rng);
    Tensor b1 = random_tensor({2}, rng);
    CHECK(check_op([&](const Tensor& t) { return sum_all(conv1d(t, w1, b1, Padding::same)); },
                   x1) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(conv1d(x1, t, b1, Padding::same)); },
                   w1) < 1e-4);

    CHECK(check_op([&](const Tensor& t) { return sum_all(avg_pool2d(t, 2, 2)); }, x) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(max_pool2d(t, 2, 2)); }, x) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(im2col(t, 3, Padding::same)); }, x) <
          1e-4);
    CHECK(check_op(
              [&](const Tensor& t) { return sum_all(slice(reshape(t, Shape{20, 2}), 0, 3, 9)); },
              x) < 1e-4);
    Tensor row = random_tensor({1, 4}, rng);
    CHECK(check_op([&](const Tensor& t) { return sum_all(repeat_rows(t, 5)); }, row) < 1e-4);
    Tensor xa = random_tensor({2, 3}, rng);
    Tensor xb = random_tensor({4, 3}, rng);
    CHECK(check_op([&](const Tensor& t) { return sum_all(concat({t, xb}, 0)); }, xa) < 1e-4);
  }
}

TEST_CASE("gradients of dynamic-conv helper ops") {
  Rng rng(55);
  const std::size_t F = 4, Tn = 3, C = 2, G = 9, O = 3, n = 2;
  for (int rep = 0; rep < 10; ++rep) {
    Tensor m = random_tensor({Tn * F, C * G}, rng);
    Tensor gate = random_tensor({F, C}, rng);
    CHECK(check_op([&](const Tensor& t) { return sum_all(scale_freq_groups(t, gate, F, G)); },
                   m) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(scale_freq_groups(m, t, F, G)); },
                   gate) < 1e-4);

    Tensor z0 = random_tensor({Tn * F, O}, rng);
    Tensor z1 = random_tensor({Tn * F, O}, rng);
    Tensor wts = random_tensor({F, n}, rng);
    CHECK(check_op([&](const Tensor& t) { return sum_all(mix_over_banks({t, z1}, wts, F)); },
                   z0) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(mix_over_banks({z0, z1}, t, F)); },
                   wts) < 1e-4);

    Tensor bank = random_tensor({n, O, C}, rng);
    Tensor bw = random_tensor({n}, rng);
    CHECK(check_op([&](const Tensor& t) { return sum_all(blend_first_axis(t, bw)); }, bank) <
          1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(blend_first_axis(bank, t)); }, bw) <
          1e-4);

    Tensor g2 = random_tensor({O}, rng);
    CHECK(check_op([&](const Tensor& t) { return sum_all(scale_axis(t, 1, g2)); }, bank) < 1e-4);
    CHECK(check_op([&](const Tensor& t) { return sum_all(scale_axis(bank, 1, t)); }, g2) < 1e-4);
  }
}

TEST_CASE("batch norm normalizes and is differentiable") {
  Rng rng(66);
  Tensor x = random_tensor({8, 4, 3}, rng, -2.0, 5.0);
  Tensor gamma = Tensor::ones({3}, true);
  Tensor beta = Tensor::zeros({3}, true);
  Tensor rm = Tensor::zeros({3});
  Tensor rv = Tensor::ones({3});
  Tensor y = batch_norm(x, gamma, beta, rm, rv, 0.99, 1e-5, true);
  // Per-channel mean ~0, var ~1.
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t r = 0; r < 32; ++r) mean += y.values()[r * 3 + c];
    mean /= 32.0;
    for (std::size_t r = 0; r < 32; ++r) {
      const double d = y.values()[r * 3 + c] - mean;
      var += d * d;
    }
    var /= 32.0;
    CHECK(std::fabs(mean) < 1e-10);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }

  auto bn_wrap = [&](const Tensor& t) {
    Tensor rm2 = Tensor::zeros({3});
    Tensor rv2 = Tensor::ones({3});
    Rng r2(9);
    Tensor proj = random_tensor({8, 4, 3}, r2);
    return sum_all(mul(batch_norm(t, gamma, beta, rm2, rv2, 0.99, 1e-5, true), proj));
  };
  CHECK(check_op(bn_wrap, x) < 1e-4);

  Tensor g2 = random_tensor({3}, rng);
  auto bn_gamma = [&](const Tensor& t) {
    Tensor rm2 = Tensor::zeros({3});
    Tensor rv2 = Tensor::ones({3});
    Rng r2(13);
    Tensor proj = random_tensor({8, 4, 3}, r2);
    return sum_all(mul(batch_norm(x, t, beta, rm2, rv2, 0.99, 1e-5, true), proj));
  };
  CHECK(check_op(bn_gamma, g2) < 1e-4);
}

TEST_CASE("losses match hand arithmetic and differentiate") {
  // Predicting 0.5 everywhere costs ln 2 per entry.
  Tensor pred({4}, {0.5, 0.5, 0.5, 0.5});
  Tensor targets({4}, {1.0, 0.0, 1.0, 0.0});
  Tensor w = Tensor::ones({4});
  Tensor loss = bce_loss(pred, targets, w, 4.0);
  CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor good({2}, {1.0 - 1e-7, 1e-7});
  Tensor tgt({2}, {1.0, 0.0});
  CHECK(bce_loss(good, tgt, Tensor::ones({2}), 2.0).item() < 1e-5);

  Rng rng(77);
  Tensor p = random_tensor({6}, rng, 0.05, 0.95);
  Tensor t6 = random_tensor({6}, rng, 0.0, 1.0);
  Tensor w6 = random_tensor({6}, rng, 0.1, 1.0);
  CHECK(check_op([&](const Tensor& q) { return bce_loss(q, t6, w6, 6.0); }, p) < 1e-4);
  CHECK(check_op([&](const Tensor& q) { return mse_loss(q, t6, 6.0); }, p) < 1e-4);

  Tensor m1({2, 2}, {0.2, 0.8, 0.5, 0.1});
  Tensor m2({2, 2}, {0.0, 1.0, 1.0, 0.0});
  // Hand: ((0.2)^2 + (0.2)^2 + (0.5)^2 + (0.1)^2) / 4
  CHECK(mse_loss(m1, m2, 4.0).item() ==
        doctest::Approx((0.04 + 0.04 + 0.25 + 0.01) / 4.0).epsilon(1e-12));
}

TEST_CASE("gru zero fixed point, single step, and oracle unroll") {
  Rng rng(88);
  GruParams zero;
  zero.update_w = Tensor::zeros({3, 4}, true);
  zero.update_u = Tensor::zeros({4, 4}, true);
  zero.update_b = Tensor::zeros({1, 4}, true);
  zero.reset_w = Tensor::zeros({3, 4}, true);
  zero.reset_u = Tensor::zeros({4, 4}, true);
  zero.reset_b = Tensor::zeros({1, 4}, true);
  zero.cand_w = Tensor::zeros({3, 4}, true);
  zero.cand_u = Tensor::zeros({4, 4}, true);
  zero.cand_b = Tensor::zeros({1, 4}, true);
  Tensor out0 = gru_forward(Tensor::zeros({5, 3}), zero);
  for (double v : out0.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(gru_forward(Tensor::zeros({0, 3}), zero), std::invalid_argument);

  GruParams p = GruParams::init(3, 4, rng);
  oracle::GruCellRef ref{3, 4, p.update_w.values(), p.update_u.values(),
                         p.update_b.values(), p.reset_w.values(), p.reset_u.values(),
                         p.reset_b.values(), p.cand_w.values(), p.cand_u.values(),
                         p.cand_b.values()};

  Tensor x1 = random_tensor({1, 3}, rng);
  Tensor y1 = gru_forward(x1, p);
  auto h1 = ref.step(x1.values(), std::vector<double>(4, 0.0));
  CHECK(max_abs_diff(y1.values(), h1) < 1e-14);

  Tensor x3 = random_tensor({3, 3}, rng);
  Tensor y3 = gru_forward(x3, p);
  std::vector<double> h(4, 0.0);
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<double> xt(x3.values().begin() + t * 3, x3.values().begin() + (t + 1) * 3);
    h = ref.step(xt, h);
    for (std::size_t j = 0; j < 4; ++j) CHECK(y3.at({t, j}) == doctest::Approx(h[j]).epsilon(1e-13));
  }

  // Gradient through time, including the bidirectional wrapper.
  GruParams pb = GruParams::init(3, 4, rng);
  CHECK(check_op([&](const Tensor& t) { return sum_all(bigru_forward(t, p, pb)); }, x3) < 1e-4);
  CHECK(check_op([&](const Tensor& t) {
          GruParams q = p;
          q.cand_u = t;
          return sum_all(gru_forward(x3, q));
        },
                 p.cand_u) < 1e-4);
}

TEST_CASE("backward never mutates forward values") {
  Rng rng(99);
  Tensor x = random_tensor({3, 4, 2}, rng);
  Tensor w = random_tensor({2, 2, 3, 3}, rng);
  Tensor b = random_tensor({2}, rng);
  w.set_requires_grad(true);
  b.set_requires_grad(true);

  Tape tape;
  std::vector<double> first_forward;
  {
    TapeScope scope(tape);
    Tensor y = conv2d(x, w, b, Padding::same);
    first_forward = y.values();
    Tensor loss = sum_all(mul(y, y));
    const std::vector<double> snapshot = y.values();
    tape.backward(loss);
    CHECK(std::memcmp(snapshot.data(), y.values().data(), snapshot.size() * sizeof(double)) == 0);
  }
  // Re-running forward after backward is bitwise identical.
  Tensor y2 = conv2d(x, w, b, Padding::same);
  REQUIRE(y2.size() == first_forward.size());
  CHECK(std::memcmp(first_forward.data(), y2.values().data(),
                    first_forward.size() * sizeof(double)) == 0);

  CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), std::logic_error);
}

TEST_CASE("gradient accumulation is additive across uses") {
  Tensor x({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = add(mul(x, x), mul(x, x));  // d/dx = 4x
    tape.backward(sum_all(y));
  }
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  CHECK(x.grad()[1] == doctest::Approx(8.0));
}
