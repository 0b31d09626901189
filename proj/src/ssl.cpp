#include "mfd/ssl.hpp"

#include <cmath>
#include <stdexcept>

namespace mfd::ssl {

void Thresholds::validate() const {
  if (!(clip > 0.0 && clip < 1.0) || !(frame > 0.0 && frame < 1.0))
    throw std::invalid_argument("thresholds must lie strictly inside (0,1)");
}

MedianFilterSpec MedianFilterSpec::uniform(std::size_t classes, std::size_t window) {
  MedianFilterSpec spec;
  spec.windows.assign(classes, window);
  spec.validate();
  return spec;
}

MedianFilterSpec MedianFilterSpec::from_seconds(std::size_t classes, double seconds,
                                                double hop_seconds) {
  if (!(hop_seconds > 0.0)) throw std::invalid_argument("median filter: hop must be positive");
  std::size_t w = static_cast<std::size_t>(std::lround(seconds / hop_seconds));
  if (w < 1) w = 1;
  if (w % 2 == 0) ++w;
  return uniform(classes, w);
}

void MedianFilterSpec::validate() const {
  if (windows.empty()) throw std::invalid_argument("median filter: no class windows");
  for (std::size_t w : windows)
    if (w < 1 || w % 2 == 0)
      throw std::invalid_argument("median filter: window lengths must be odd and >= 1, got " +
                                  std::to_string(w));
}

TeacherState TeacherState::from_student(const NamedTensorList& student, double decay) {
  if (!(decay >= 0.0 && decay < 1.0))
    throw std::invalid_argument("teacher state: decay must be in [0,1)");
  TeacherState t;
  t.ema_decay = decay;
  t.params.reserve(student.size());
  for (const auto& [name, tensor] : student) t.params.emplace_back(name, tensor.clone());
  return t;
}

void ema_update(TeacherState& teacher, const NamedTensorList& student, double decay) {
  if (teacher.params.size() != student.size())
    throw std::invalid_argument("ema_update: parameter list size mismatch");
  for (std::size_t i = 0; i < student.size(); ++i) {
    auto& [tname, tt] = teacher.params[i];
    const auto& [sname, st] = student[i];
    if (tname != sname || tt.shape() != st.shape())
      throw std::invalid_argument("ema_update: mismatch at '" + tname + "' vs '" + sname + "'");
    auto& tv = tt.mutable_values();
    const auto& sv = st.values();
    for (std::size_t j = 0; j < tv.size(); ++j) tv[j] = decay * tv[j] + (1.0 - decay) * sv[j];
  }
}

double ema_warmup_decay(std::size_t step, double target) {
  const double ramp = (static_cast<double>(step) + 1.0) / (static_cast<double>(step) + 10.0);
  return std::min(target, ramp);
}

std::vector<double> median_filter(const std::vector<double>& seq, std::size_t window) {
  if (window % 2 == 0 || window < 1)
    throw std::invalid_argument("median_filter: window must be odd and >= 1");
  if (window == 1) return seq;
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(window / 2);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(seq.size());
  std::vector<double> out(seq.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    // The window shrinks symmetrically at the edges so it stays centered
    // (and odd).
    const std::ptrdiff_t radius = std::min({half, i, n - 1 - i});
    const std::size_t len = static_cast<std::size_t>(2 * radius + 1);
    std::size_t ones = 0;
    for (std::ptrdiff_t j = i - radius; j <= i + radius; ++j)
      if (seq[static_cast<std::size_t>(j)] > 0.5) ++ones;
    out[static_cast<std::size_t>(i)] = (2 * ones > len) ? 1.0 : 0.0;
  }
  return out;
}

Tensor median_filter_columns(const Tensor& frames, const MedianFilterSpec& spec) {
  if (frames.rank() != 2)
    throw std::invalid_argument("median_filter_columns: expected [T,K] input");
  spec.validate();
  const std::size_t t_len = frames.shape()[0], k = frames.shape()[1];
  if (spec.windows.size() < k)
    throw std::invalid_argument("median_filter_columns: spec covers " +
                                std::to_string(spec.windows.size()) + " classes, need " +
                                std::to_string(k));
  Tensor out(frames.shape(), 0.0);
  std::vector<double> col(t_len);
  const auto& fv = frames.values();
  auto& ov = out.mutable_values();
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t t = 0; t < t_len; ++t) col[t] = fv[t * k + c];
    std::vector<double> filtered = median_filter(col, spec.windows[c]);
    for (std::size_t t = 0; t < t_len; ++t) ov[t * k + c] = filtered[t];
  }
  return out;
}

PseudoLabelBatch make_pseudo_labels(const Tensor& clip_probs, const Tensor& frame_probs,
                                    const Thresholds& thresholds, const MedianFilterSpec& spec,
                                    bool literal_frame_clip_zeroing) {
  thresholds.validate();
  if (clip_probs.rank() != 1 || frame_probs.rank() != 2)
    throw std::invalid_argument("make_pseudo_labels: expected [K] clip and [T,K] frame probs");
  const std::size_t k = clip_probs.size();
  if (frame_probs.shape()[1] != k)
    throw std::invalid_argument("make_pseudo_labels: class count mismatch");
  const std::size_t t_len = frame_probs.shape()[0];

  PseudoLabelBatch batch;
  batch.clip_probs = clip_probs.clone();
  batch.frame_probs = frame_probs.clone();
  if (literal_frame_clip_zeroing) {
    auto& fp = batch.frame_probs.mutable_values();
    for (double& v : fp)
      if (v < thresholds.clip) v = 0.0;
  }

  batch.clip_labels = Tensor({k}, 0.0);
  auto& cl = batch.clip_labels.mutable_values();
  for (std::size_t c = 0; c < k; ++c) cl[c] = (clip_probs.values()[c] > thresholds.clip) ? 1.0 : 0.0;

  Tensor pre({t_len, k}, 0.0);
  auto& pv = pre.mutable_values();
  const auto& fp = batch.frame_probs.values();
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t c = 0; c < k; ++c)
      pv[t * k + c] = (cl[c] == 1.0 && fp[t * k + c] > thresholds.frame) ? 1.0 : 0.0;
  batch.frame_labels = median_filter_columns(pre, spec);
  return batch;
}

std::pair<Tensor, Tensor> confidence_weights(const Tensor& clip_probs, const Tensor& frame_probs,
                                             const Tensor& clip_labels,
                                             const Tensor& frame_labels) {
  const std::size_t k = clip_probs.size();
  const std::size_t t_len = frame_probs.shape()[0];
  Tensor cw({k}, 0.0);
  Tensor cs({t_len, k}, 0.0);
  auto& cwv = cw.mutable_values();
  auto& csv = cs.mutable_values();
  const auto& cp = clip_probs.values();
  const auto& fp = frame_probs.values();
  const auto& cl = clip_labels.values();
  const auto& fl = frame_labels.values();
  for (std::size_t c = 0; c < k; ++c) cwv[c] = (cl[c] == 1.0) ? cp[c] : 0.0;
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t i = t * k + c;
      csv[i] = (fl[i] == 1.0) ? fp[i] * cp[c] : 0.0;
    }
  return {cw, cs};
}

void fill_confidence_weights(PseudoLabelBatch& batch) {
  auto [cw, cs] = confidence_weights(batch.clip_probs, batch.frame_probs, batch.clip_labels,
                                     batch.frame_labels);
  batch.clip_conf = cw;
  batch.frame_conf = cs;
}

std::pair<Tensor, Tensor> cmt_consistency_loss(const PseudoLabelBatch& batch,
                                               const sed::Prediction& student) {
  if (student.weak.shape() != batch.clip_labels.shape() ||
      student.strong.shape() != batch.frame_labels.shape())
    throw std::invalid_argument("cmt_consistency_loss: prediction/pseudo-label shape mismatch");
  const double k = static_cast<double>(batch.clip_labels.size());
  const double tk = static_cast<double>(batch.frame_labels.size());
  Tensor weak = bce_loss(student.weak, batch.clip_labels, batch.clip_conf, k);
  Tensor strong = bce_loss(student.strong, batch.frame_labels, batch.frame_conf, tk);
  return {weak, strong};
}

std::pair<Tensor, Tensor> mt_consistency_loss(const sed::Prediction& teacher,
                                              const sed::Prediction& student) {
  if (student.weak.shape() != teacher.weak.shape() ||
      student.strong.shape() != teacher.strong.shape())
    throw std::invalid_argument("mt_consistency_loss: prediction shape mismatch");
  Tensor weak = mse_loss(student.weak, teacher.weak, static_cast<double>(teacher.weak.size()));
  Tensor strong =
      mse_loss(student.strong, teacher.strong, static_cast<double>(teacher.strong.size()));
  return {weak, strong};
}

double lambda_rampup(std::size_t step, std::size_t ramp_steps, double max_weight) {
  if (ramp_steps == 0 || step >= ramp_steps) return max_weight;
  const double x = static_cast<double>(step) / static_cast<double>(ramp_steps);
  return max_weight * std::exp(-5.0 * (1.0 - x) * (1.0 - x));
}

}  // namespace mfd::ssl
