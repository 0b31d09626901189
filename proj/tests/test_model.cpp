#include <doctest.h>

#include <cmath>

#include "mfd/model.hpp"
#include "model_check.hpp"
#include "test_util.hpp"

using namespace mfd;
using namespace mfd::sed;
using testutil::random_tensor;

namespace {

CRNNConfig tiny_config(conv::ConvVariant variant, std::size_t n = 2) {
  CRNNConfig cfg;
  cfg.mel_bins = 8;
  cfg.blocks = {{3, 3, 2, 2}, {4, 3, 2, 2}};
  cfg.variant = conv::ConvVariantConfig::for_variant(variant, n, 2);
  cfg.gru_hidden = 8;
  cfg.classes = 3;
  return cfg;
}

}  // namespace

TEST_CASE("zeroed model predicts 0.5 everywhere") {
  CRNNConfig cfg = tiny_config(conv::ConvVariant::static_kernel, 1);
  cfg.use_batch_norm = false;
  Crnn model(cfg, 1);
  for (auto& [name, p] : model.parameters())
    for (double& v : p.mutable_values()) v = 0.0;
  Rng rng(2);
  Tensor mel = testutil::random_tensor({12, 8}, rng);
  Prediction pred = model.forward(mel, false);
  for (double v : pred.strong.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  for (double v : pred.weak.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("forward shape contract and probability range") {
  Rng rng(3);
  CRNNConfig cfg = tiny_config(conv::ConvVariant::mfdconv);
  Crnn model(cfg, 7);
  Tensor mel = testutil::random_tensor({13, 8}, rng, -4.0, 4.0);
  Prediction pred = model.forward(mel, true);
  CHECK(pred.strong.shape() == Shape{3, 3});  // 13 -> 6 -> 3 frames
  CHECK(pred.weak.shape() == Shape{3});
  for (double v : pred.strong.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  // weak pooling never exceeds the per-class frame maximum
  for (std::size_t c = 0; c < 3; ++c) {
    double mx = 0.0;
    for (std::size_t t = 0; t < 3; ++t) mx = std::max(mx, pred.strong.at({t, c}));
    CHECK(pred.weak.values()[c] <= mx + 1e-12);
  }
  CHECK_THROWS_AS(model.forward(testutil::random_tensor({13, 9}, rng), false),
                  std::invalid_argument);
}

TEST_CASE("weak_from_strong pooling modes") {
  Tensor constant({4, 2}, {0.3, 0.7, 0.3, 0.7, 0.3, 0.7, 0.3, 0.7});
  for (WeakPoolMode mode :
       {WeakPoolMode::linear_softmax, WeakPoolMode::max, WeakPoolMode::mean}) {
    Tensor w = weak_from_strong(constant, mode);
    CHECK(w.values()[0] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(w.values()[1] == doctest::Approx(0.7).epsilon(1e-12));
  }

  Tensor spike({3, 1}, {0.0, 1.0, 0.0});
  CHECK(weak_from_strong(spike, WeakPoolMode::max).values()[0] == doctest::Approx(1.0));

  Tensor two({2, 1}, {0.2, 0.8});
  CHECK(weak_from_strong(two, WeakPoolMode::linear_softmax).values()[0] ==
        doctest::Approx(0.68).epsilon(1e-12));

  Tensor zero({3, 2}, 0.0);
  Tensor wz = weak_from_strong(zero, WeakPoolMode::linear_softmax);
  CHECK(wz.values()[0] == 0.0);
  CHECK(wz.values()[1] == 0.0);
}

TEST_CASE("supervised loss hand cases") {
  Prediction pred;
  pred.strong = Tensor({2, 2}, {0.5, 0.5, 0.5, 0.5});
  pred.weak = Tensor({2}, {0.5, 0.5});
  Tensor sl({2, 2}, {1, 0, 0, 1});
  Tensor wl({2}, {1, 0});
  LossResult r = supervised_loss(pred, sl, wl, {true, true});
  CHECK(!r.warned);
  CHECK(r.value.item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));

  Prediction perfect;
  perfect.strong = Tensor({2, 2}, {1.0 - 1e-7, 1e-7, 1e-7, 1.0 - 1e-7});
  perfect.weak = Tensor({2}, {1.0 - 1e-7, 1e-7});
  Tensor wl2({2}, {1, 0});
  LossResult r2 = supervised_loss(perfect, sl, wl2, {true, true});
  CHECK(r2.value.item() < 1e-5);

  // 2x2 hand computation, strong only:
  // -(ln 0.8 + ln 0.7 + ln 0.6 + ln 0.9) / 4
  Prediction hand;
  hand.strong = Tensor({2, 2}, {0.8, 0.3, 0.4, 0.9});
  hand.weak = Tensor({2}, {0.5, 0.5});
  Tensor sl2({2, 2}, {1, 0, 0, 1});
  const double expected =
      -(std::log(0.8) + std::log(1.0 - 0.3) + std::log(1.0 - 0.4) + std::log(0.9)) / 4.0;
  LossResult r3 = supervised_loss(hand, sl2, wl, {true, false});
  CHECK(r3.value.item() == doctest::Approx(expected).epsilon(1e-12));

  LossResult empty = supervised_loss(hand, sl2, wl, {false, false});
  CHECK(empty.warned);
  CHECK(empty.value.item() == 0.0);
}

TEST_CASE("downsample_labels max-pools frames") {
  Tensor labels({5, 2}, {1, 0, 0, 0, 0, 1, 0, 0, 1, 1});
  Tensor down = downsample_labels(labels, 2);
  CHECK(down.shape() == Shape{2, 2});
  CHECK(down.values() == std::vector<double>{1, 0, 0, 1});
}

TEST_CASE("variant swaps change the parameter count exactly by the head") {
  const std::size_t n = 4, r = 4;
  auto count_for = [&](conv::ConvVariant v, std::size_t kernels) {
    CRNNConfig cfg = tiny_config(v, kernels);
    cfg.variant.reduction = r;
    Crnn model(cfg, 5);
    return model.param_count();
  };
  auto heads_for = [&](conv::ConvVariant v, std::size_t kernels) {
    CRNNConfig cfg = tiny_config(v, kernels);
    cfg.variant.reduction = r;
    std::size_t total = 0;
    std::size_t c_in = 1;
    for (const auto& b : cfg.blocks) {
      total += conv::head_param_count(cfg.variant, c_in, b.out_channels);
      c_in = b.out_channels;
    }
    return total;
  };

  const std::size_t base_static = count_for(conv::ConvVariant::static_kernel, 1);
  // dyconv with a single kernel differs from static by its head only.
  CHECK(count_for(conv::ConvVariant::dyconv, 1) ==
        base_static + heads_for(conv::ConvVariant::dyconv, 1));
  // among dynamic variants with equal n, counts differ by head sizes only
  const std::size_t dy = count_for(conv::ConvVariant::dyconv, n);
  const std::size_t fd = count_for(conv::ConvVariant::fdconv, n);
  const std::size_t od = count_for(conv::ConvVariant::odconv, n);
  const std::size_t mfd = count_for(conv::ConvVariant::mfdconv, n);
  CHECK(dy == fd);  // same branch structure, different pooling only
  CHECK(od - fd == heads_for(conv::ConvVariant::odconv, n) -
                       heads_for(conv::ConvVariant::fdconv, n));
  CHECK(mfd == od);  // same switches, different pooling only
}

TEST_CASE("attention map inspection") {
  Rng rng(9);
  CRNNConfig cfg = tiny_config(conv::ConvVariant::mfdconv);
  Crnn model(cfg, 11);
  Tensor mel = testutil::random_tensor({12, 8}, rng);
  conv::FreqAttention attn = model.attention_maps(mel, 1);
  // Block 1 sees the pooled 4-bin frequency axis.
  CHECK(attn.kernel_weights.shape() == Shape{4, 2});
  CHECK_THROWS_AS(model.attention_maps(mel, 5), std::invalid_argument);

  CRNNConfig scfg = tiny_config(conv::ConvVariant::static_kernel, 1);
  Crnn smodel(scfg, 11);
  CHECK_THROWS_AS(smodel.attention_maps(mel, 0), std::invalid_argument);
}

TEST_CASE("end-to-end gradients of the tiny CRNN") {
  Rng rng(13);
  CRNNConfig cfg = tiny_config(conv::ConvVariant::mfdconv);
  Crnn model(cfg, 17);
  Tensor mel = testutil::random_tensor({9, 8}, rng);
  Tensor strong({2, 3}, {1, 0, 0, 0, 1, 0});
  Tensor weak({3}, {1, 1, 0});
  auto report = testutil::model_grad_check(model, mel, strong, weak, 1e-5);
  INFO("worst parameter: ", report.worst_param, "[", report.worst_coord, "]");
  CHECK(report.max_rel_error < 1e-3);
}

TEST_CASE("checkpoint save/adopt round-trips model state") {
  Rng rng(15);
  CRNNConfig cfg = tiny_config(conv::ConvVariant::mfdconv);
  Crnn model(cfg, 19);
  Tensor mel = testutil::random_tensor({12, 8}, rng);
  Prediction before = model.forward(mel, false);

  const std::string path = "model_state_test.ckpt";
  save_checkpoint(path, model.state(), "trailer text");
  Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.trailer == "trailer text");

  Crnn other(cfg, 777);  // different init
  other.adopt_state(loaded.tensors);
  Prediction after = other.forward(mel, false);
  CHECK(testutil::max_abs_diff(before.strong.values(), after.strong.values()) == 0.0);
  std::remove(path.c_str());
}
