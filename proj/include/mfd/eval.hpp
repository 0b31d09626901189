#pragma once

// Event decoding and scoring: collar-based F1 plus a single-operating-point
// intersection F1 (the detection/ground-truth criteria PSDS is built on).

#include <map>
#include <string>
#include <vector>

#include "mfd/events.hpp"
#include "mfd/ssl.hpp"
#include "mfd/tensor.hpp"

namespace mfd::eval {

struct ClassScore {
  std::size_t tp = 0, fp = 0, fn = 0;

  double precision() const;
  double recall() const;
  double f1() const;  // 2PR/(P+R), 0/0 -> 0
};

using ClassCounts = std::map<std::string, ClassScore>;

struct ScoreReport {
  ClassCounts per_class;
  double macro_f1 = 0.0;
};

void merge_counts(ClassCounts& into, const ClassCounts& add);
// Macro F1 over classes with any activity (tp+fp+fn > 0).
ScoreReport score_from_counts(const ClassCounts& counts);

// threshold (strict >) -> per-class median filter -> contiguous positive runs
// become events with onset = start*hop, offset = (end+1)*hop.
EventList decode_events(const Tensor& strong, const std::vector<std::string>& classes,
                        double threshold, const ssl::MedianFilterSpec& spec, double hop_seconds);

// Inverse of decode_events up to frame quantization.
Tensor rasterize(const EventList& events, const std::vector<std::string>& classes,
                 std::size_t frames, double hop_seconds);

struct CollarParams {
  double onset_collar = 0.2;
  double offset_collar_min = 0.2;
  double offset_collar_frac = 0.2;  // fraction of the reference event length
};

// Greedy one-to-one matching per class in onset order; a hypothesis matches
// when |onset diff| <= collar and |offset diff| <= max(min, frac * ref len).
ClassCounts collar_counts(const EventList& ref, const EventList& hyp,
                          const CollarParams& params = {});
ScoreReport collar_f1(const EventList& ref, const EventList& hyp,
                      const CollarParams& params = {});

// One-to-one maximum matching per class; a pair is eligible when the
// intersection covers >= dtc of the hypothesis and >= gtc of the reference.
ClassCounts intersection_counts(const EventList& ref, const EventList& hyp, double dtc = 0.7,
                                double gtc = 0.7);
ScoreReport intersection_f1(const EventList& ref, const EventList& hyp, double dtc = 0.7,
                            double gtc = 0.7);

// The three columns reported per model: intersection F1 at (0.7,0.7), at
// (0.1,0.1), and collar-based F1.
struct EvalSummary {
  ScoreReport psds1_like;
  ScoreReport psds2_like;
  ScoreReport collar;
};

std::string summary_json(const EvalSummary& summary);
std::string summary_table(const std::string& row_label, const EvalSummary& summary);

}  // namespace mfd::eval
