#pragma once

// Training loop tying the model, SSL machinery, features and evaluation
// together: batch sampling over the strong/weak/unlabeled splits, SGD with
// momentum, EMA teacher updates, per-step JSONL metrics and best-on-
// validation checkpointing.

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfd/config.hpp"
#include "mfd/eval.hpp"
#include "mfd/features.hpp"
#include "mfd/model.hpp"
#include "mfd/ssl.hpp"

namespace mfd::train {

struct StepMetrics {
  std::size_t step = 0;
  double loss_total = 0.0;
  double loss_sup = 0.0;
  double loss_w_con = 0.0;
  double loss_s_con = 0.0;
  double lambda = 0.0;
  double pseudo_pos_rate_weak = 0.0;
  double pseudo_pos_rate_strong = 0.0;

  std::string to_json() const;
};

// Non-finite loss; carries the offending batch for the diagnostic dump.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& msg, std::vector<std::string> batch_clips)
      : std::runtime_error(msg), batch(std::move(batch_clips)) {}
  std::vector<std::string> batch;
};

struct PreparedClip {
  std::string id;
  audio::Split split = audio::Split::strong;
  Tensor features;       // [T, mel_bins]
  Tensor strong_labels;  // [T', K] at the model's output frame rate
  Tensor weak_labels;    // [K]
  bool has_strong = false;
  bool has_weak = false;
  EventList events;  // reference events (strong / validation)
};

std::vector<PreparedClip> prepare_clips(const cli::RunConfig& cfg,
                                        const audio::DatasetIndex& index);

class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum, bool cosine_decay, std::size_t total_steps);
  void step(const NamedTensorList& params, std::size_t step_index);
  double learning_rate(std::size_t step_index) const;

 private:
  double lr_, momentum_;
  bool cosine_;
  std::size_t total_steps_;
  std::vector<std::vector<double>> velocity_;
};

struct TrainResult {
  double best_val_collar_f1 = 0.0;
  bool validated = false;
  std::string checkpoint_path;
  std::size_t steps = 0;
  std::vector<StepMetrics> metrics;
};

class Trainer {
 public:
  Trainer(cli::RunConfig cfg, const audio::DatasetIndex& index);

  // Full loop; writes metrics.jsonl and model.ckpt under out_dir.
  TrainResult run(const std::string& out_dir);

  // One optimization step on an explicit batch.
  StepMetrics train_step(const std::vector<const PreparedClip*>& batch);

  sed::Crnn& student() { return *student_; }
  sed::Crnn& teacher() { return *teacher_; }
  const ssl::TeacherState& teacher_state() const { return teacher_state_; }
  const std::vector<PreparedClip>& clips() const { return clips_; }
  const std::vector<std::string>& classes() const { return classes_; }
  std::size_t total_steps() const { return total_steps_; }
  double output_hop_seconds() const { return hop_out_; }

  eval::EvalSummary evaluate_split(audio::Split split, bool use_teacher = false);

 private:
  std::vector<const PreparedClip*> next_batch();

  cli::RunConfig cfg_;
  std::vector<std::string> classes_;
  std::vector<PreparedClip> clips_;
  std::unique_ptr<sed::Crnn> student_;
  std::unique_ptr<sed::Crnn> teacher_;
  ssl::TeacherState teacher_state_;
  ssl::MedianFilterSpec median_spec_;
  ssl::Thresholds thresholds_;
  SgdOptimizer optimizer_;
  double hop_out_ = 0.0;
  std::size_t steps_per_epoch_ = 0;
  std::size_t total_steps_ = 0;
  std::size_t step_ = 0;
  Rng sampler_rng_;
  struct Pool {
    std::vector<std::size_t> indices;
    std::size_t pos = 0;
  };
  Pool strong_pool_, weak_pool_, unlabeled_pool_;
  void draw(Pool& pool, std::size_t count, std::vector<const PreparedClip*>& out);
};

// Forward + decode + scoring over one split of prepared clips.
eval::EvalSummary evaluate_model(sed::Crnn& model, const std::vector<PreparedClip>& clips,
                                 audio::Split split, const std::vector<std::string>& classes,
                                 const cli::RunConfig& cfg, double hop_out_seconds);

}  // namespace mfd::train
