#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mfd/config.hpp"
#include "mfd/trainer.hpp"
#include "test_util.hpp"

using namespace mfd;
using namespace mfd::cli;
using namespace mfd::train;

namespace {

RunConfig tiny_run_config(const std::string& data_dir) {
  RunConfig cfg;
  cfg.data_dir = data_dir;
  cfg.classes = 3;
  cfg.mel_bins = 32;
  cfg.channels = {4, 8};
  cfg.pool_t = {2, 2};
  cfg.pool_f = {2, 4};
  cfg.gru_hidden = 8;
  cfg.kernel_count = 2;
  cfg.reduction = 2;
  cfg.epochs = 1;
  cfg.batch_strong = 1;
  cfg.batch_weak = 1;
  cfg.batch_unlabeled = 1;
  cfg.seed = 5;
  return cfg;
}

struct CorpusFixture {
  std::string dir;
  audio::DatasetIndex index;

  explicit CorpusFixture(const std::string& name, std::uint64_t seed = 11) : dir(name) {
    audio::SynthConfig scfg;
    scfg.seed = seed;
    scfg.strong_clips = 3;
    scfg.weak_clips = 2;
    scfg.unlabeled_clips = 3;
    scfg.validation_clips = 2;
    scfg.classes = 3;
    scfg.clip_seconds = 2.0;
    index = audio::synth_generate(scfg, dir);
  }
  ~CorpusFixture() { std::filesystem::remove_all(dir); }
};

}  // namespace

TEST_CASE("run config round-trips through its text form") {
  RunConfig cfg;
  cfg.variant = conv::ConvVariant::fdconv;
  cfg.channels = {8, 16};
  cfg.pool_t = {2, 2};
  cfg.pool_f = {4, 4};
  cfg.ssl_mode = SslMode::mt;
  cfg.lr = 0.025;
  cfg.seed = 99;
  RunConfig back = RunConfig::from_text(cfg.to_text());
  CHECK(back.variant == cfg.variant);
  CHECK(back.channels == cfg.channels);
  CHECK(back.pool_f == cfg.pool_f);
  CHECK(back.ssl_mode == cfg.ssl_mode);
  CHECK(back.lr == doctest::Approx(cfg.lr));
  CHECK(back.seed == cfg.seed);
  CHECK(RunConfig::from_text(back.to_text()).to_text() == back.to_text());
}

TEST_CASE("config overrides and validation") {
  RunConfig cfg;
  cfg.apply_override("ssl.mode=supervised");
  CHECK(cfg.ssl_mode == SslMode::supervised);
  cfg.apply_override("model.variant = dyconv");
  CHECK(cfg.variant == conv::ConvVariant::dyconv);
  cfg.apply_override("train.seed=123");
  CHECK(cfg.seed == 123);
  CHECK_THROWS_AS(cfg.apply_override("nonsense"), std::invalid_argument);
  CHECK_THROWS_AS(cfg.apply_override("no.such.key=1"), std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_text("ssl.mode = hybrid\n"), std::invalid_argument);

  RunConfig bad;
  bad.clip_threshold = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  // defaults pin the published hyperparameters
  RunConfig defaults;
  CHECK(defaults.kernel_count == 4);
  CHECK(defaults.reduction == 4);
  CHECK(defaults.clip_threshold == 0.5);
  CHECK(defaults.frame_threshold == 0.5);
}

TEST_CASE("training is deterministic under a fixed seed") {
  CorpusFixture corpus("trainer_test_det");
  RunConfig cfg = tiny_run_config(corpus.dir);
  cfg.ssl_mode = SslMode::cmt;
  cfg.epochs = 2;

  auto run_losses = [&](const std::string& out) {
    Trainer trainer(cfg, corpus.index);
    TrainResult result = trainer.run(out);
    std::vector<std::string> lines;
    for (const auto& m : result.metrics) lines.push_back(m.to_json());
    std::filesystem::remove_all(out);
    return lines;
  };
  auto a = run_losses("trainer_run_a");
  auto b = run_losses("trainer_run_b");
  REQUIRE(a.size() == b.size());
  CHECK(a[0] == b[0]);
  CHECK(a.back() == b.back());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("zero consistency weight reproduces the supervised trajectory bitwise") {
  CorpusFixture corpus("trainer_test_lambda0");
  RunConfig sup_cfg = tiny_run_config(corpus.dir);
  sup_cfg.ssl_mode = SslMode::supervised;
  RunConfig mt_cfg = tiny_run_config(corpus.dir);
  mt_cfg.ssl_mode = SslMode::mt;
  mt_cfg.lambda_max = 0.0;

  Trainer sup(sup_cfg, corpus.index);
  Trainer mt(mt_cfg, corpus.index);
  for (int s = 0; s < 6; ++s) {
    (void)sup.train_step({&sup.clips()[0], &sup.clips()[3], &sup.clips()[5]});
    (void)mt.train_step({&mt.clips()[0], &mt.clips()[3], &mt.clips()[5]});
  }
  NamedTensorList ps = sup.student().parameters();
  NamedTensorList pm = mt.student().parameters();
  REQUIRE(ps.size() == pm.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    CHECK(ps[i].first == pm[i].first);
    CHECK(ps[i].second.values() == pm[i].second.values());
  }
}

TEST_CASE("ema teacher follows the student") {
  CorpusFixture corpus("trainer_test_ema");
  RunConfig cfg = tiny_run_config(corpus.dir);
  cfg.ssl_mode = SslMode::mt;
  Trainer trainer(cfg, corpus.index);

  // Teacher starts as an exact copy.
  NamedTensorList t0 = trainer.teacher().state();
  NamedTensorList s0 = trainer.student().state();
  for (std::size_t i = 0; i < t0.size(); ++i)
    CHECK(t0[i].second.values() == s0[i].second.values());

  (void)trainer.train_step({&trainer.clips()[0], &trainer.clips()[4]});
  // After a step the student moved; the teacher sits between old and new.
  bool any_moved = false;
  NamedTensorList t1 = trainer.teacher().state();
  NamedTensorList s1 = trainer.student().state();
  for (std::size_t i = 0; i < t1.size(); ++i)
    if (t1[i].second.values() != s1[i].second.values()) any_moved = true;
  CHECK(any_moved);

  // Teacher tensors share storage with the teacher model.
  CHECK(trainer.teacher_state().params[0].second.storage() ==
        trainer.teacher().state()[0].second.storage());
}

TEST_CASE("non-finite losses abort with the offending batch") {
  CorpusFixture corpus("trainer_test_nan");
  RunConfig cfg = tiny_run_config(corpus.dir);
  Trainer trainer(cfg, corpus.index);
  PreparedClip poisoned = trainer.clips()[0];
  poisoned.id = "poisoned_clip";
  poisoned.features = poisoned.features.clone();
  poisoned.features.mutable_values()[10] = std::numeric_limits<double>::quiet_NaN();
  try {
    (void)trainer.train_step({&poisoned});
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    REQUIRE(e.batch.size() == 1);
    CHECK(e.batch[0] == "poisoned_clip");
  }
}

TEST_CASE("metrics JSONL carries the frozen schema") {
  CorpusFixture corpus("trainer_test_metrics");
  RunConfig cfg = tiny_run_config(corpus.dir);
  cfg.ssl_mode = SslMode::cmt;
  Trainer trainer(cfg, corpus.index);
  TrainResult result = trainer.run("trainer_metrics_out");

  std::ifstream is("trainer_metrics_out/metrics.jsonl");
  REQUIRE(is.good());
  std::string line;
  std::getline(is, line);
  CHECK(line.find("\"meta\"") != std::string::npos);
  std::getline(is, line);
  for (const char* key : {"\"step\"", "\"loss_total\"", "\"loss_sup\"", "\"loss_w_con\"",
                          "\"loss_s_con\"", "\"lambda\"", "\"pseudo_pos_rate_weak\"",
                          "\"pseudo_pos_rate_strong\""})
    CHECK(line.find(key) != std::string::npos);

  CHECK(std::filesystem::exists(result.checkpoint_path));
  Checkpoint ckpt = load_checkpoint(result.checkpoint_path);
  RunConfig from_trailer = RunConfig::from_text(ckpt.trailer);
  CHECK(from_trailer.classes == cfg.classes);
  std::filesystem::remove_all("trainer_metrics_out");
}

TEST_CASE("supervised training reduces the loss on a tiny corpus") {
  CorpusFixture corpus("trainer_test_learn", 23);
  RunConfig cfg = tiny_run_config(corpus.dir);
  cfg.ssl_mode = SslMode::supervised;
  cfg.epochs = 12;
  cfg.lr = 0.05;
  Trainer trainer(cfg, corpus.index);
  TrainResult result = trainer.run("trainer_learn_out");
  REQUIRE(result.metrics.size() >= 10);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 3; ++i) first += result.metrics[i].loss_total;
  for (std::size_t i = result.metrics.size() - 3; i < result.metrics.size(); ++i)
    last += result.metrics[i].loss_total;
  CHECK(last < first);
  std::filesystem::remove_all("trainer_learn_out");
}
