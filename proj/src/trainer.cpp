#include "mfd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace mfd::train {

std::string StepMetrics::to_json() const {
  nlohmann::json j;
  j["step"] = step;
  j["loss_total"] = loss_total;
  j["loss_sup"] = loss_sup;
  j["loss_w_con"] = loss_w_con;
  j["loss_s_con"] = loss_s_con;
  j["lambda"] = lambda;
  j["pseudo_pos_rate_weak"] = pseudo_pos_rate_weak;
  j["pseudo_pos_rate_strong"] = pseudo_pos_rate_strong;
  return j.dump();
}

std::vector<PreparedClip> prepare_clips(const cli::RunConfig& cfg,
                                        const audio::DatasetIndex& index) {
  if (index.classes.empty())
    throw std::runtime_error("dataset index carries no class vocabulary");
  if (index.classes.size() != cfg.classes)
    throw std::runtime_error("dataset has " + std::to_string(index.classes.size()) +
                             " classes but the run config expects " +
                             std::to_string(cfg.classes));
  audio::LogMelConfig mel_cfg;
  mel_cfg.window = cfg.stft_window;
  mel_cfg.hop = cfg.stft_hop;
  mel_cfg.mel_bins = cfg.mel_bins;

  const std::size_t factor = cfg.crnn_config().time_pool_factor();
  std::vector<PreparedClip> out;
  out.reserve(index.clips.size());
  for (const auto& rec : index.clips) {
    PreparedClip clip;
    clip.id = rec.path;
    clip.split = rec.split;
    const std::string wav_path =
        (std::filesystem::path(index.root) / rec.path).string();
    audio::LogMelSpec spec = audio::logmel(audio::load_wav(wav_path), mel_cfg);
    clip.features = spec.frames;
    const std::size_t t_in = spec.frames.shape()[0];
    const std::size_t t_out = t_in / factor;

    if (rec.split == audio::Split::strong || rec.split == audio::Split::validation) {
      Tensor fine = audio::rasterize_events(rec.events, index.classes, t_in, spec.hop_seconds);
      clip.strong_labels = sed::downsample_labels(fine, factor);
      clip.has_strong = true;
      clip.weak_labels = Tensor({index.classes.size()}, 0.0);
      auto& wv = clip.weak_labels.mutable_values();
      for (const auto& ev : rec.events) wv[index.class_id(ev.label)] = 1.0;
      clip.has_weak = true;
      clip.events = rec.events;
    } else if (rec.split == audio::Split::weak) {
      clip.weak_labels = Tensor({index.classes.size()}, 0.0);
      auto& wv = clip.weak_labels.mutable_values();
      for (const auto& tag : rec.tags) wv[index.class_id(tag)] = 1.0;
      clip.has_weak = true;
      clip.strong_labels = Tensor({t_out, index.classes.size()}, 0.0);
    } else {
      clip.strong_labels = Tensor({t_out, index.classes.size()}, 0.0);
      clip.weak_labels = Tensor({index.classes.size()}, 0.0);
    }
    out.push_back(std::move(clip));
  }
  return out;
}

SgdOptimizer::SgdOptimizer(double lr, double momentum, bool cosine_decay,
                           std::size_t total_steps)
    : lr_(lr), momentum_(momentum), cosine_(cosine_decay), total_steps_(total_steps) {}

double SgdOptimizer::learning_rate(std::size_t step_index) const {
  if (!cosine_ || total_steps_ == 0) return lr_;
  const double x = std::min(1.0, static_cast<double>(step_index) /
                                     static_cast<double>(total_steps_));
  return lr_ * 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
}

void SgdOptimizer::step(const NamedTensorList& params, std::size_t step_index) {
  if (velocity_.size() != params.size()) velocity_.resize(params.size());
  const double lr = learning_rate(step_index);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i].second;
    auto& v = velocity_[i];
    if (v.size() != p.size()) v.assign(p.size(), 0.0);
    Tensor& t = const_cast<Tensor&>(p);
    auto& values = t.mutable_values();
    if (!p.has_grad()) {
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] *= momentum_;
        values[j] -= lr * v[j];
      }
      continue;
    }
    const auto& g = p.grad();
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      values[j] -= lr * v[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(cli::RunConfig cfg, const audio::DatasetIndex& index)
    : cfg_(std::move(cfg)),
      classes_(index.classes),
      clips_(prepare_clips(cfg_, index)),
      teacher_state_{},
      median_spec_(ssl::MedianFilterSpec::uniform(cfg_.classes, 1)),
      thresholds_{cfg_.clip_threshold, cfg_.frame_threshold},
      optimizer_(cfg_.lr, cfg_.momentum, cfg_.cosine_decay, 0),
      sampler_rng_(cfg_.seed ^ 0x9e3779b97f4a7c15ull) {
  cfg_.class_names = index.classes;
  cfg_.validate();
  thresholds_.validate();
  student_ = std::make_unique<sed::Crnn>(cfg_.crnn_config(), cfg_.seed);
  teacher_ = std::make_unique<sed::Crnn>(cfg_.crnn_config(), cfg_.seed);
  teacher_state_ = ssl::TeacherState::from_student(student_->state(), cfg_.ema_decay);
  teacher_->adopt_state(teacher_state_.params);

  const audio::LogMelConfig mel_cfg{16000, cfg_.stft_window, cfg_.stft_hop, cfg_.mel_bins};
  hop_out_ = mel_cfg.hop_seconds() * static_cast<double>(cfg_.crnn_config().time_pool_factor());
  median_spec_ = ssl::MedianFilterSpec::from_seconds(cfg_.classes, cfg_.median_seconds, hop_out_);

  for (std::size_t i = 0; i < clips_.size(); ++i) {
    switch (clips_[i].split) {
      case audio::Split::strong: strong_pool_.indices.push_back(i); break;
      case audio::Split::weak: weak_pool_.indices.push_back(i); break;
      case audio::Split::unlabeled: unlabeled_pool_.indices.push_back(i); break;
      case audio::Split::validation: break;
    }
  }
  const std::size_t train_clips =
      strong_pool_.indices.size() + weak_pool_.indices.size() + unlabeled_pool_.indices.size();
  if (train_clips == 0) throw std::runtime_error("no training clips in the dataset");
  const std::size_t batch_total = cfg_.batch_strong + cfg_.batch_weak + cfg_.batch_unlabeled;
  steps_per_epoch_ = std::max<std::size_t>(1, (train_clips + batch_total - 1) / batch_total);
  total_steps_ = steps_per_epoch_ * cfg_.epochs;
  optimizer_ = SgdOptimizer(cfg_.lr, cfg_.momentum, cfg_.cosine_decay, total_steps_);

  auto shuffle = [&](Pool& pool) {
    for (std::size_t i = pool.indices.size(); i > 1; --i)
      std::swap(pool.indices[i - 1], pool.indices[sampler_rng_.below(i)]);
  };
  shuffle(strong_pool_);
  shuffle(weak_pool_);
  shuffle(unlabeled_pool_);
}

void Trainer::draw(Pool& pool, std::size_t count, std::vector<const PreparedClip*>& out) {
  if (pool.indices.empty()) return;
  for (std::size_t i = 0; i < count; ++i) {
    if (pool.pos >= pool.indices.size()) {
      pool.pos = 0;
      for (std::size_t j = pool.indices.size(); j > 1; --j)
        std::swap(pool.indices[j - 1], pool.indices[sampler_rng_.below(j)]);
    }
    out.push_back(&clips_[pool.indices[pool.pos++]]);
  }
}

std::vector<const PreparedClip*> Trainer::next_batch() {
  std::vector<const PreparedClip*> batch;
  draw(strong_pool_, cfg_.batch_strong, batch);
  draw(weak_pool_, cfg_.batch_weak, batch);
  draw(unlabeled_pool_, cfg_.batch_unlabeled, batch);
  return batch;
}

StepMetrics Trainer::train_step(const std::vector<const PreparedClip*>& batch) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  StepMetrics metrics;
  metrics.step = step_;
  const double lambda = (cfg_.ssl_mode == cli::SslMode::supervised)
                            ? 0.0
                            : ssl::lambda_rampup(
                                  step_,
                                  static_cast<std::size_t>(cfg_.lambda_ramp_frac *
                                                           static_cast<double>(total_steps_)),
                                  cfg_.lambda_max);
  metrics.lambda = lambda;

  for (auto& [name, p] : student_->parameters()) p.zero_grad();

  Tape tape;
  Tensor total;
  {
    TapeScope scope(tape);
    std::vector<sed::Prediction> preds(batch.size());
    Tensor sup_sum = Tensor::scalar(0.0);
    std::size_t sup_count = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const PreparedClip& clip = *batch[i];
      if (!clip.features.all_finite()) {
        std::vector<std::string> ids;
        for (const auto* c : batch) ids.push_back(c->id);
        throw NumericalError("non-finite features in clip " + clip.id + " at step " +
                                 std::to_string(step_),
                             std::move(ids));
      }
      preds[i] = student_->forward(clip.features, /*training=*/true);
      if (!preds[i].strong.all_finite() || !preds[i].weak.all_finite()) {
        std::vector<std::string> ids;
        for (const auto* c : batch) ids.push_back(c->id);
        throw NumericalError("non-finite prediction for clip " + clip.id + " at step " +
                                 std::to_string(step_),
                             std::move(ids));
      }
      sed::LabelMask mask{clip.has_strong, clip.has_weak};
      if (mask.strong || mask.weak) {
        sed::LossParts parts =
            sed::supervised_loss_parts(preds[i], clip.strong_labels, clip.weak_labels, mask);
        sup_sum = add(sup_sum, parts.sum);
        sup_count += parts.count;
      }
    }
    Tensor sup = (sup_count > 0)
                     ? scale(sup_sum, 1.0 / static_cast<double>(sup_count))
                     : Tensor::scalar(0.0);

    Tensor w_con = Tensor::scalar(0.0);
    Tensor s_con = Tensor::scalar(0.0);
    if (lambda > 0.0) {
      double pos_w = 0.0, pos_s = 0.0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const PreparedClip& clip = *batch[i];
        sed::Prediction teacher_pred;
        {
          NoTapeScope no_tape;
          teacher_pred = teacher_->forward(clip.features, /*training=*/false);
        }
        if (cfg_.ssl_mode == cli::SslMode::cmt) {
          ssl::PseudoLabelBatch pl = ssl::make_pseudo_labels(
              teacher_pred.weak, teacher_pred.strong, thresholds_, median_spec_,
              cfg_.literal_frame_clip_zeroing);
          ssl::fill_confidence_weights(pl);
          auto [w, s] = ssl::cmt_consistency_loss(pl, preds[i]);
          w_con = add(w_con, w);
          s_con = add(s_con, s);
          double acc = 0.0;
          for (double v : pl.clip_labels.values()) acc += v;
          pos_w += acc / static_cast<double>(pl.clip_labels.size());
          acc = 0.0;
          for (double v : pl.frame_labels.values()) acc += v;
          pos_s += acc / static_cast<double>(pl.frame_labels.size());
        } else {
          auto [w, s] = ssl::mt_consistency_loss(teacher_pred, preds[i]);
          w_con = add(w_con, w);
          s_con = add(s_con, s);
        }
      }
      const double inv = 1.0 / static_cast<double>(batch.size());
      w_con = scale(w_con, inv);
      s_con = scale(s_con, inv);
      metrics.pseudo_pos_rate_weak = pos_w * inv;
      metrics.pseudo_pos_rate_strong = pos_s * inv;
    }

    total = add(sup, scale(add(w_con, s_con), lambda));
    metrics.loss_sup = sup.item();
    metrics.loss_w_con = w_con.item();
    metrics.loss_s_con = s_con.item();
    metrics.loss_total = total.item();

    if (!std::isfinite(metrics.loss_total)) {
      std::vector<std::string> ids;
      for (const auto* clip : batch) ids.push_back(clip->id);
      throw NumericalError("non-finite loss at step " + std::to_string(step_), std::move(ids));
    }
    tape.backward(total);
  }

  optimizer_.step(student_->parameters(), step_);
  if (cfg_.ssl_mode != cli::SslMode::supervised) {
    const double decay = ssl::ema_warmup_decay(step_, cfg_.ema_decay);
    ssl::ema_update(teacher_state_, student_->state(), decay);
  }
  ++step_;
  return metrics;
}

eval::EvalSummary evaluate_model(sed::Crnn& model, const std::vector<PreparedClip>& clips,
                                 audio::Split split, const std::vector<std::string>& classes,
                                 const cli::RunConfig& cfg, double hop_out_seconds) {
  const ssl::MedianFilterSpec spec =
      ssl::MedianFilterSpec::from_seconds(cfg.classes, cfg.median_seconds, hop_out_seconds);
  eval::ClassCounts collar, inter1, inter2;
  NoTapeScope no_tape;
  for (const auto& clip : clips) {
    if (clip.split != split) continue;
    sed::Prediction pred = model.forward(clip.features, /*training=*/false);
    EventList hyp =
        eval::decode_events(pred.strong, classes, cfg.frame_threshold, spec, hop_out_seconds);
    eval::merge_counts(collar, eval::collar_counts(clip.events, hyp));
    eval::merge_counts(inter1, eval::intersection_counts(clip.events, hyp, 0.7, 0.7));
    eval::merge_counts(inter2, eval::intersection_counts(clip.events, hyp, 0.1, 0.1));
  }
  eval::EvalSummary summary;
  summary.collar = eval::score_from_counts(collar);
  summary.psds1_like = eval::score_from_counts(inter1);
  summary.psds2_like = eval::score_from_counts(inter2);
  return summary;
}

eval::EvalSummary Trainer::evaluate_split(audio::Split split, bool use_teacher) {
  return evaluate_model(use_teacher ? *teacher_ : *student_, clips_, split, classes_, cfg_,
                        hop_out_);
}

TrainResult Trainer::run(const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::string metrics_path = (std::filesystem::path(out_dir) / "metrics.jsonl").string();
  std::ofstream metrics_file(metrics_path);
  if (!metrics_file) throw std::runtime_error("cannot open metrics file " + metrics_path);
  {
    nlohmann::json meta;
    meta["meta"] = {{"lr", cfg_.lr},
                    {"momentum", cfg_.momentum},
                    {"cosine_decay", cfg_.cosine_decay},
                    {"seed", cfg_.seed},
                    {"ssl_mode", cli::ssl_mode_name(cfg_.ssl_mode)},
                    {"variant", conv::variant_name(cfg_.variant)},
                    {"epochs", cfg_.epochs},
                    {"steps_per_epoch", steps_per_epoch_}};
    metrics_file << meta.dump() << "\n";
  }

  TrainResult result;
  NamedTensorList best_state;
  bool has_validation = false;
  for (const auto& clip : clips_)
    if (clip.split == audio::Split::validation) has_validation = true;

  for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch_; ++s) {
      StepMetrics m = train_step(next_batch());
      metrics_file << m.to_json() << "\n";
      result.metrics.push_back(m);
    }
    metrics_file.flush();
    if (has_validation && cfg_.val_every > 0 && (epoch + 1) % cfg_.val_every == 0) {
      // Mean-teacher modes deploy the EMA teacher; supervised keeps the
      // student.
      const bool use_teacher = cfg_.ssl_mode != cli::SslMode::supervised;
      const eval::EvalSummary summary =
          evaluate_split(audio::Split::validation, use_teacher);
      result.validated = true;
      if (summary.collar.macro_f1 >= result.best_val_collar_f1) {
        result.best_val_collar_f1 = summary.collar.macro_f1;
        best_state.clear();
        const NamedTensorList state =
            use_teacher ? teacher_->state() : student_->state();
        for (const auto& [name, t] : state) best_state.emplace_back(name, t.clone());
      }
    }
  }
  result.steps = step_;

  const std::string ckpt_path = (std::filesystem::path(out_dir) / "model.ckpt").string();
  const NamedTensorList& to_save = best_state.empty() ? student_->state() : best_state;
  save_checkpoint(ckpt_path, to_save, cfg_.to_text());
  result.checkpoint_path = ckpt_path;
  return result;
}

}  // namespace mfd::train
