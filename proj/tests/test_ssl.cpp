#include <doctest.h>

#include <cmath>

#include "mfd/ssl.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mfd;
using namespace mfd::ssl;
using testutil::max_abs_diff;

TEST_CASE("ema update rules") {
  NamedTensorList student;
  student.emplace_back("w", Tensor({2}, {4.0, -2.0}));
  TeacherState teacher = TeacherState::from_student(student, 0.999);

  // decay 0: teacher equals student
  teacher.params[0].second.mutable_values() = {2.0, 8.0};
  ema_update(teacher, student, 0.0);
  CHECK(teacher.params[0].second.values() == std::vector<double>{4.0, -2.0});

  // decay 1: teacher unchanged
  teacher.params[0].second.mutable_values() = {2.0, 8.0};
  ema_update(teacher, student, 1.0);
  CHECK(teacher.params[0].second.values() == std::vector<double>{2.0, 8.0});

  // hand arithmetic: 0.5*2 + 0.5*4 = 3
  teacher.params[0].second.mutable_values() = {2.0, 2.0};
  NamedTensorList student2;
  student2.emplace_back("w", Tensor({2}, {4.0, 4.0}));
  ema_update(teacher, student2, 0.5);
  CHECK(teacher.params[0].second.values() == std::vector<double>{3.0, 3.0});

  NamedTensorList bad;
  bad.emplace_back("w", Tensor({3}, 0.0));
  CHECK_THROWS_AS(ema_update(teacher, bad, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(TeacherState::from_student(student, 1.0), std::invalid_argument);

  CHECK(ema_warmup_decay(0, 0.999) == doctest::Approx(0.1));
  CHECK(ema_warmup_decay(8, 0.999) == doctest::Approx(0.5));
  CHECK(ema_warmup_decay(100000, 0.999) == doctest::Approx(0.999));
}

TEST_CASE("median filter spec construction and hand cases") {
  CHECK_THROWS_AS(MedianFilterSpec::uniform(3, 4), std::invalid_argument);
  CHECK_THROWS_AS(MedianFilterSpec::uniform(0, 3).validate(), std::invalid_argument);
  MedianFilterSpec spec = MedianFilterSpec::from_seconds(2, 0.45, 0.078);
  // round(0.45/0.078) = 6, forced odd -> 7
  CHECK(spec.windows[0] == 7);

  // window 1 is the identity
  std::vector<double> seq = {0, 1, 1, 0, 1};
  CHECK(median_filter(seq, 1) == seq);

  std::vector<double> alt = {0, 1, 0, 1, 0};
  CHECK(median_filter(alt, 3) == std::vector<double>{0, 0, 1, 0, 0});

  std::vector<double> ones(9, 1.0);
  for (std::size_t w : {1u, 3u, 5u, 9u}) CHECK(median_filter(ones, w) == ones);

  CHECK_THROWS_AS(median_filter(seq, 2), std::invalid_argument);
}

TEST_CASE("median filter matches the brute-force oracle on 1000 random sequences") {
  Rng rng(99);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t len = 1 + rng.below(40);
    std::vector<double> seq(len);
    for (double& v : seq) v = (rng.uniform() < 0.5) ? 0.0 : 1.0;
    const std::size_t window = 1 + 2 * rng.below(6);
    CHECK(median_filter(seq, window) == oracle::median_filter(seq, window));
  }
}

TEST_CASE("pseudo-label construction follows the thresholding rules") {
  Thresholds th;  // 0.5 / 0.5
  MedianFilterSpec spec = MedianFilterSpec::uniform(2, 1);

  SUBCASE("clip indicator is a strict comparison") {
    Tensor clip({2}, {0.7, 0.5});
    Tensor frames({1, 2}, {0.9, 0.9});
    PseudoLabelBatch batch = make_pseudo_labels(clip, frames, th, spec);
    CHECK(batch.clip_labels.values() == std::vector<double>{1.0, 0.0});
  }

  SUBCASE("clip gate silences frame labels") {
    Tensor clip({1}, {0.3});
    Tensor frames({4, 1}, {0.9, 0.99, 1.0, 0.8});
    PseudoLabelBatch batch = make_pseudo_labels(clip, frames, th, MedianFilterSpec::uniform(1, 1));
    for (double v : batch.frame_labels.values()) CHECK(v == 0.0);
  }

  SUBCASE("worked example with window 3") {
    Tensor clip({1}, {0.9});
    Tensor frames({5, 1}, {0.6, 0.4, 0.7, 0.8, 0.2});
    PseudoLabelBatch batch =
        make_pseudo_labels(clip, frames, th, MedianFilterSpec::uniform(1, 3));
    // pre-filter [1,0,1,1,0] -> [1,1,1,1,0]
    CHECK(batch.frame_labels.values() == std::vector<double>{1, 1, 1, 1, 0});
    // and the brute-force oracle agrees
    CHECK(oracle::median_filter({1, 0, 1, 1, 0}, 3) == std::vector<double>{1, 1, 1, 1, 0});
  }

  SUBCASE("literal per-frame clip zeroing flag") {
    Tensor clip({1}, {0.9});
    Tensor frames({3, 1}, {0.45, 0.6, 0.3});
    PseudoLabelBatch batch = make_pseudo_labels(clip, frames, th,
                                                MedianFilterSpec::uniform(1, 1), true);
    CHECK(batch.frame_probs.values() == std::vector<double>{0.0, 0.6, 0.0});
  }
}

TEST_CASE("pseudo-labeling is idempotent on binary inputs with window 1") {
  Rng rng(7);
  Thresholds th;
  MedianFilterSpec spec = MedianFilterSpec::uniform(3, 1);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor clip({3}, 0.0);
    for (double& v : clip.mutable_values()) v = (rng.uniform() < 0.5) ? 0.0 : 1.0;
    Tensor frames({6, 3}, 0.0);
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t c = 0; c < 3; ++c)
        frames.mutable_values()[t * 3 + c] =
            (clip.values()[c] == 1.0 && rng.uniform() < 0.5) ? 1.0 : 0.0;
    PseudoLabelBatch first = make_pseudo_labels(clip, frames, th, spec);
    PseudoLabelBatch second =
        make_pseudo_labels(first.clip_labels, first.frame_labels, th, spec);
    CHECK(first.clip_labels.values() == second.clip_labels.values());
    CHECK(first.frame_labels.values() == second.frame_labels.values());
  }
}

TEST_CASE("raising the frame threshold never adds positive frames") {
  Rng rng(21);
  Thresholds lo{0.5, 0.3}, hi{0.5, 0.7};
  MedianFilterSpec spec = MedianFilterSpec::uniform(2, 1);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor clip({2}, 0.0);
    for (double& v : clip.mutable_values()) v = rng.uniform();
    Tensor frames({8, 2}, 0.0);
    for (double& v : frames.mutable_values()) v = rng.uniform();
    PseudoLabelBatch a = make_pseudo_labels(clip, frames, lo, spec);
    PseudoLabelBatch b = make_pseudo_labels(clip, frames, hi, spec);
    for (std::size_t i = 0; i < a.frame_labels.size(); ++i)
      CHECK(b.frame_labels.values()[i] <= a.frame_labels.values()[i]);
  }
}

TEST_CASE("confidence weights per the definition") {
  Tensor clip({2}, {0.8, 1.0});
  Tensor frames({2, 2}, {0.9, 0.3, 0.5, 0.6});
  Tensor clip_labels({2}, {1.0, 1.0});
  Tensor frame_labels({2, 2}, {1.0, 0.0, 0.0, 1.0});
  auto [cw, cs] = confidence_weights(clip, frames, clip_labels, frame_labels);
  CHECK(cw.values()[0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(cw.values()[1] == doctest::Approx(1.0).epsilon(1e-15));  // upper bound
  CHECK(cs.values()[0] == doctest::Approx(0.72).epsilon(1e-15));  // 0.9 * 0.8
  CHECK(cs.values()[1] == 0.0);
  CHECK(cs.values()[2] == 0.0);
  CHECK(cs.values()[3] == doctest::Approx(0.6).epsilon(1e-15));

  Tensor zl({2}, {0.0, 0.0});
  auto [cw0, cs0] = confidence_weights(clip, frames, zl, frame_labels);
  CHECK(cw0.values()[0] == 0.0);
  CHECK(cw0.values()[1] == 0.0);
}

TEST_CASE("positive frame confidence implies a positive clip label") {
  Rng rng(31);
  Thresholds th;
  MedianFilterSpec spec = MedianFilterSpec::uniform(3, 3);
  for (int rep = 0; rep < 30; ++rep) {
    Tensor clip({3}, 0.0);
    for (double& v : clip.mutable_values()) v = rng.uniform();
    Tensor frames({10, 3}, 0.0);
    for (double& v : frames.mutable_values()) v = rng.uniform();
    PseudoLabelBatch batch = make_pseudo_labels(clip, frames, th, spec);
    fill_confidence_weights(batch);
    for (std::size_t t = 0; t < 10; ++t)
      for (std::size_t c = 0; c < 3; ++c)
        if (batch.frame_conf.at({t, c}) > 0.0) CHECK(batch.clip_labels.values()[c] == 1.0);
  }
}

TEST_CASE("cmt consistency loss hand cases") {
  SUBCASE("zero confidence means zero loss") {
    PseudoLabelBatch batch;
    batch.clip_labels = Tensor({3}, {1, 0, 1});
    batch.frame_labels = Tensor({2, 3}, {1, 0, 0, 0, 0, 1});
    batch.clip_conf = Tensor({3}, 0.0);
    batch.frame_conf = Tensor({2, 3}, 0.0);
    sed::Prediction student;
    student.weak = Tensor({3}, {0.4, 0.9, 0.2});
    student.strong = Tensor({2, 3}, {0.4, 0.9, 0.2, 0.3, 0.8, 0.7});
    auto [w, s] = cmt_consistency_loss(batch, student);
    CHECK(w.item() == 0.0);
    CHECK(s.item() == 0.0);
  }

  SUBCASE("single weak entry at 0.5 costs ln2 / K") {
    PseudoLabelBatch batch;
    batch.clip_labels = Tensor({4}, {1, 0, 0, 0});
    batch.frame_labels = Tensor({1, 4}, 0.0);
    batch.clip_conf = Tensor({4}, {1, 0, 0, 0});
    batch.frame_conf = Tensor({1, 4}, 0.0);
    sed::Prediction student;
    student.weak = Tensor({4}, {0.5, 0.1, 0.2, 0.3});
    student.strong = Tensor({1, 4}, {0.5, 0.5, 0.5, 0.5});
    auto [w, s] = cmt_consistency_loss(batch, student);
    CHECK(w.item() == doctest::Approx(std::log(2.0) / 4.0).epsilon(1e-12));
    CHECK(s.item() == 0.0);
  }

  SUBCASE("student matching the pseudo-labels is nearly free") {
    PseudoLabelBatch batch;
    batch.clip_labels = Tensor({2}, {1, 0});
    batch.frame_labels = Tensor({2, 2}, {1, 0, 1, 0});
    batch.clip_conf = Tensor({2}, {0.9, 0.0});
    batch.frame_conf = Tensor({2, 2}, {0.8, 0, 0.7, 0});
    sed::Prediction student;
    student.weak = Tensor({2}, {1.0 - 1e-7, 1e-7});
    student.strong = Tensor({2, 2}, {1.0 - 1e-7, 1e-7, 1.0 - 1e-7, 1e-7});
    auto [w, s] = cmt_consistency_loss(batch, student);
    CHECK(w.item() < 1e-5);
    CHECK(s.item() < 1e-5);
  }

  SUBCASE("all-ones confidence reduces to unweighted BCE") {
    Rng rng(17);
    PseudoLabelBatch batch;
    batch.clip_labels = Tensor({3}, {1, 0, 1});
    batch.frame_labels = Tensor({4, 3}, 0.0);
    for (double& v : batch.frame_labels.mutable_values()) v = (rng.uniform() < 0.5) ? 1.0 : 0.0;
    batch.clip_conf = Tensor::ones({3});
    batch.frame_conf = Tensor::ones({4, 3});
    sed::Prediction student;
    student.weak = testutil::random_tensor({3}, rng, 0.05, 0.95);
    student.strong = testutil::random_tensor({4, 3}, rng, 0.05, 0.95);
    auto [w, s] = cmt_consistency_loss(batch, student);
    const Tensor uw = bce_loss(student.weak, batch.clip_labels, Tensor::ones({3}), 3.0);
    const Tensor us = bce_loss(student.strong, batch.frame_labels, Tensor::ones({4, 3}), 12.0);
    CHECK(std::fabs(w.item() - uw.item()) <= 1e-12);
    CHECK(std::fabs(s.item() - us.item()) <= 1e-12);
  }
}

TEST_CASE("mt consistency loss") {
  sed::Prediction a, b;
  a.weak = Tensor({2}, {0.3, 0.6});
  a.strong = Tensor({2, 2}, {0.3, 0.6, 0.1, 0.9});
  b.weak = a.weak.clone();
  b.strong = a.strong.clone();
  auto [w0, s0] = mt_consistency_loss(a, b);
  CHECK(w0.item() == 0.0);
  CHECK(s0.item() == 0.0);

  sed::Prediction t1, s1p;
  t1.weak = Tensor({2}, {1.0, 1.0});
  t1.strong = Tensor({2, 2}, 1.0);
  s1p.weak = Tensor({2}, {0.0, 0.0});
  s1p.strong = Tensor({2, 2}, 0.0);
  auto [w1, s1] = mt_consistency_loss(t1, s1p);
  CHECK(w1.item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(s1.item() == doctest::Approx(1.0).epsilon(1e-15));

  // 2x2 hand case: ((0.2)^2 + (0.1)^2 + (0.3)^2 + (0.4)^2) / 4
  sed::Prediction t2, s2p;
  t2.weak = Tensor({2}, {0.5, 0.5});
  t2.strong = Tensor({2, 2}, {0.7, 0.5, 0.2, 0.9});
  s2p.weak = Tensor({2}, {0.5, 0.5});
  s2p.strong = Tensor({2, 2}, {0.5, 0.4, 0.5, 0.5});
  auto [w2, s2] = mt_consistency_loss(t2, s2p);
  CHECK(w2.item() == 0.0);
  CHECK(s2.item() == doctest::Approx((0.04 + 0.01 + 0.09 + 0.16) / 4.0).epsilon(1e-12));
}

TEST_CASE("consistency gradients reach the student only") {
  Rng rng(41);
  PseudoLabelBatch batch;
  batch.clip_labels = Tensor({2}, {1, 0});
  batch.frame_labels = Tensor({3, 2}, 0.0);
  batch.clip_conf = Tensor({2}, {0.9, 0.0});
  batch.frame_conf = Tensor({3, 2}, 0.0);

  // "Teacher" probabilities are plain constants.
  Tensor teacher_weak = testutil::random_tensor({2}, rng, 0.1, 0.9);

  Tensor logits = testutil::random_tensor({2}, rng);
  logits.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    sed::Prediction student;
    student.weak = sigmoid(logits);
    student.strong = Tensor({3, 2}, 0.5);
    auto [w, s] = cmt_consistency_loss(batch, student);
    tape.backward(w);
  }
  CHECK(logits.has_grad());
  CHECK(!batch.clip_labels.has_grad());
  CHECK(!batch.clip_conf.has_grad());
  CHECK(!teacher_weak.has_grad());
}

TEST_CASE("lambda ramp") {
  CHECK(lambda_rampup(0, 100, 2.0) == doctest::Approx(2.0 * std::exp(-5.0)).epsilon(1e-12));
  CHECK(lambda_rampup(100, 100, 2.0) == doctest::Approx(2.0));
  CHECK(lambda_rampup(250, 100, 2.0) == doctest::Approx(2.0));
  CHECK(lambda_rampup(5, 0, 2.0) == doctest::Approx(2.0));
  double prev = 0.0;
  for (std::size_t s = 0; s <= 100; s += 5) {
    const double v = lambda_rampup(s, 100, 2.0);
    CHECK(v >= prev);
    prev = v;
  }
}
