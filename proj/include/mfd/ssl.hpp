#pragma once

// Mean teacher and confident mean teacher: EMA teacher state, pseudo-label
// construction (clip/frame thresholding + event-specific median filters),
// confidence weights, and the two consistency losses.

#include <cstddef>
#include <utility>
#include <vector>

#include "mfd/checkpoint.hpp"
#include "mfd/model.hpp"
#include "mfd/tensor.hpp"

namespace mfd::ssl {

struct Thresholds {
  double clip = 0.5;   // clip-wise threshold
  double frame = 0.5;  // frame-wise threshold
  void validate() const;
};

// Per-class odd median filter window lengths, in frames.
struct MedianFilterSpec {
  std::vector<std::size_t> windows;

  static MedianFilterSpec uniform(std::size_t classes, std::size_t window);
  // Window of `seconds` at the given hop, rounded and forced odd.
  static MedianFilterSpec from_seconds(std::size_t classes, double seconds, double hop_seconds);
  void validate() const;
  std::size_t window_for(std::size_t cls) const { return windows.at(cls); }
};

// Teacher outputs, corrected pseudo-labels and confidence weights for one
// clip. Labels are binary; confidences are zero wherever the label is zero,
// and a positive frame label implies a positive clip label.
struct PseudoLabelBatch {
  Tensor clip_probs;    // [K] raw teacher clip probabilities
  Tensor frame_probs;   // [T,K] raw teacher frame probabilities
  Tensor clip_labels;   // [K] binary
  Tensor frame_labels;  // [T,K] binary
  Tensor clip_conf;     // [K]
  Tensor frame_conf;    // [T,K]
};

// Parameter snapshot mirroring the student.
struct TeacherState {
  NamedTensorList params;
  double ema_decay = 0.999;

  static TeacherState from_student(const NamedTensorList& student, double decay);
};

// theta_t <- decay * theta_t + (1 - decay) * theta_s, elementwise.
void ema_update(TeacherState& teacher, const NamedTensorList& student, double decay);
// Warm-up ramp: min(target, (step+1)/(step+10)).
double ema_warmup_decay(std::size_t step, double target);

// Median of a binary sequence; the window shrinks at the edges.
std::vector<double> median_filter(const std::vector<double>& seq, std::size_t window);
// Column-wise filtering of [T,K] frames with per-class windows.
Tensor median_filter_columns(const Tensor& frames, const MedianFilterSpec& spec);

// Thresholding (strict >) and per-class median filtering of teacher outputs.
// Frame labels are gated by the clip label. When literal_frame_clip_zeroing
// is set, frame probabilities below the clip threshold are zeroed first (the
// stored frame_probs reflect this).
PseudoLabelBatch make_pseudo_labels(const Tensor& clip_probs, const Tensor& frame_probs,
                                    const Thresholds& thresholds, const MedianFilterSpec& spec,
                                    bool literal_frame_clip_zeroing = false);

// c_w(k) = p_w(k) * [label_w(k) = 1]; c_s(t,k) = p_s(t,k) * p_w(k) * [label_s(t,k) = 1].
std::pair<Tensor, Tensor> confidence_weights(const Tensor& clip_probs, const Tensor& frame_probs,
                                             const Tensor& clip_labels,
                                             const Tensor& frame_labels);
// Convenience: fills clip_conf / frame_conf in place.
void fill_confidence_weights(PseudoLabelBatch& batch);

// Confidence-weighted BCE between pseudo-labels and student predictions,
// (clip term, frame term), normalized by K and T*K. Gradients flow only into
// the student.
std::pair<Tensor, Tensor> cmt_consistency_loss(const PseudoLabelBatch& batch,
                                               const sed::Prediction& student);

// Plain mean-teacher baseline: MSE between teacher and student probabilities.
std::pair<Tensor, Tensor> mt_consistency_loss(const sed::Prediction& teacher,
                                              const sed::Prediction& student);

// Consistency weight ramp: max_weight * exp(-5 (1 - step/ramp_steps)^2),
// clamped to max_weight after the ramp.
double lambda_rampup(std::size_t step, std::size_t ramp_steps, double max_weight);

}  // namespace mfd::ssl
