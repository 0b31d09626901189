#include "mfd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace mfd::eval {

double ClassScore::precision() const {
  return (tp + fp == 0) ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

double ClassScore::recall() const {
  return (tp + fn == 0) ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

double ClassScore::f1() const {
  const double p = precision(), r = recall();
  return (p + r == 0.0) ? 0.0 : 2.0 * p * r / (p + r);
}

void merge_counts(ClassCounts& into, const ClassCounts& add) {
  for (const auto& [label, score] : add) {
    auto& dst = into[label];
    dst.tp += score.tp;
    dst.fp += score.fp;
    dst.fn += score.fn;
  }
}

ScoreReport score_from_counts(const ClassCounts& counts) {
  ScoreReport report;
  report.per_class = counts;
  double sum = 0.0;
  std::size_t active = 0;
  for (const auto& [label, score] : counts) {
    if (score.tp + score.fp + score.fn == 0) continue;
    sum += score.f1();
    ++active;
  }
  report.macro_f1 = active ? sum / static_cast<double>(active) : 0.0;
  return report;
}

EventList decode_events(const Tensor& strong, const std::vector<std::string>& classes,
                        double threshold, const ssl::MedianFilterSpec& spec, double hop_seconds) {
  if (strong.rank() != 2 || strong.shape()[1] != classes.size())
    throw std::invalid_argument("decode_events: expected [T," + std::to_string(classes.size()) +
                                "] probabilities, got " + shape_str(strong.shape()));
  const std::size_t t_len = strong.shape()[0], k = classes.size();
  EventList events;
  std::vector<double> col(t_len);
  const auto& sv = strong.values();
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t t = 0; t < t_len; ++t) col[t] = (sv[t * k + c] > threshold) ? 1.0 : 0.0;
    const std::vector<double> smooth = ssl::median_filter(col, spec.window_for(c));
    std::size_t t = 0;
    while (t < t_len) {
      if (smooth[t] < 0.5) {
        ++t;
        continue;
      }
      const std::size_t start = t;
      while (t < t_len && smooth[t] > 0.5) ++t;
      events.push_back({static_cast<double>(start) * hop_seconds,
                        static_cast<double>(t) * hop_seconds, classes[c]});
    }
  }
  return events;
}

Tensor rasterize(const EventList& events, const std::vector<std::string>& classes,
                 std::size_t frames, double hop_seconds) {
  Tensor out({frames, classes.size()}, 0.0);
  auto& ov = out.mutable_values();
  for (const auto& ev : events) {
    std::size_t cls = classes.size();
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == ev.label) {
        cls = i;
        break;
      }
    if (cls == classes.size())
      throw std::invalid_argument("rasterize: unknown label " + ev.label);
    for (std::size_t t = 0; t < frames; ++t) {
      const double center = (static_cast<double>(t) + 0.5) * hop_seconds;
      if (center >= ev.onset && center < ev.offset) ov[t * classes.size() + cls] = 1.0;
    }
  }
  return out;
}

namespace {

std::map<std::string, EventList> group_by_class(const EventList& events) {
  std::map<std::string, EventList> groups;
  for (const auto& ev : events) {
    if (!(ev.onset < ev.offset))
      throw std::invalid_argument("event list: onset must precede offset");
    groups[ev.label].push_back(ev);
  }
  for (auto& [label, list] : groups)
    std::sort(list.begin(), list.end(),
              [](const Event& a, const Event& b) { return a.onset < b.onset; });
  return groups;
}

double intersection_len(const Event& a, const Event& b) {
  return std::max(0.0, std::min(a.offset, b.offset) - std::max(a.onset, b.onset));
}

// Kuhn's augmenting-path maximum bipartite matching on an eligibility matrix.
std::size_t max_matching(const std::vector<std::vector<bool>>& eligible, std::size_t n_right) {
  const std::size_t n_left = eligible.size();
  std::vector<std::ptrdiff_t> match_right(n_right, -1);
  std::size_t matched = 0;
  std::vector<bool> visited;
  std::function<bool(std::size_t)> try_match = [&](std::size_t u) -> bool {
    for (std::size_t v = 0; v < n_right; ++v) {
      if (!eligible[u][v] || visited[v]) continue;
      visited[v] = true;
      if (match_right[v] < 0 || try_match(static_cast<std::size_t>(match_right[v]))) {
        match_right[v] = static_cast<std::ptrdiff_t>(u);
        return true;
      }
    }
    return false;
  };
  for (std::size_t u = 0; u < n_left; ++u) {
    visited.assign(n_right, false);
    if (try_match(u)) ++matched;
  }
  return matched;
}

}  // namespace

ClassCounts collar_counts(const EventList& ref, const EventList& hyp, const CollarParams& params) {
  const auto ref_groups = group_by_class(ref);
  const auto hyp_groups = group_by_class(hyp);
  ClassCounts counts;
  for (const auto& [label, refs] : ref_groups) counts[label];
  for (const auto& [label, hyps] : hyp_groups) counts[label];

  for (auto& [label, score] : counts) {
    const auto rit = ref_groups.find(label);
    const auto hit = hyp_groups.find(label);
    const EventList empty;
    const EventList& refs = (rit == ref_groups.end()) ? empty : rit->second;
    const EventList& hyps = (hit == hyp_groups.end()) ? empty : hit->second;
    std::vector<bool> used(hyps.size(), false);
    for (const auto& r : refs) {
      const double offset_collar =
          std::max(params.offset_collar_min, params.offset_collar_frac * (r.offset - r.onset));
      bool matched = false;
      for (std::size_t j = 0; j < hyps.size(); ++j) {
        if (used[j]) continue;
        if (std::fabs(hyps[j].onset - r.onset) <= params.onset_collar &&
            std::fabs(hyps[j].offset - r.offset) <= offset_collar) {
          used[j] = true;
          matched = true;
          break;
        }
      }
      if (matched)
        ++score.tp;
      else
        ++score.fn;
    }
    for (std::size_t j = 0; j < hyps.size(); ++j)
      if (!used[j]) ++score.fp;
  }
  return counts;
}

ScoreReport collar_f1(const EventList& ref, const EventList& hyp, const CollarParams& params) {
  return score_from_counts(collar_counts(ref, hyp, params));
}

ClassCounts intersection_counts(const EventList& ref, const EventList& hyp, double dtc,
                                double gtc) {
  const auto ref_groups = group_by_class(ref);
  const auto hyp_groups = group_by_class(hyp);
  ClassCounts counts;
  for (const auto& [label, refs] : ref_groups) counts[label];
  for (const auto& [label, hyps] : hyp_groups) counts[label];

  for (auto& [label, score] : counts) {
    const auto rit = ref_groups.find(label);
    const auto hit = hyp_groups.find(label);
    const EventList empty;
    const EventList& refs = (rit == ref_groups.end()) ? empty : rit->second;
    const EventList& hyps = (hit == hyp_groups.end()) ? empty : hit->second;
    std::vector<std::vector<bool>> eligible(refs.size(), std::vector<bool>(hyps.size(), false));
    for (std::size_t i = 0; i < refs.size(); ++i)
      for (std::size_t j = 0; j < hyps.size(); ++j) {
        const double inter = intersection_len(refs[i], hyps[j]);
        const double hyp_len = hyps[j].offset - hyps[j].onset;
        const double ref_len = refs[i].offset - refs[i].onset;
        eligible[i][j] = inter >= dtc * hyp_len && inter >= gtc * ref_len;
      }
    const std::size_t matched = max_matching(eligible, hyps.size());
    score.tp += matched;
    score.fn += refs.size() - matched;
    score.fp += hyps.size() - matched;
  }
  return counts;
}

ScoreReport intersection_f1(const EventList& ref, const EventList& hyp, double dtc, double gtc) {
  return score_from_counts(intersection_counts(ref, hyp, dtc, gtc));
}

std::string summary_json(const EvalSummary& summary) {
  nlohmann::json j;
  auto dump = [](const ScoreReport& report) {
    nlohmann::json r;
    r["macro_f1"] = report.macro_f1;
    for (const auto& [label, score] : report.per_class) {
      r["per_class"][label] = {{"tp", score.tp},
                               {"fp", score.fp},
                               {"fn", score.fn},
                               {"precision", score.precision()},
                               {"recall", score.recall()},
                               {"f1", score.f1()}};
    }
    return r;
  };
  j["psds1_like"] = dump(summary.psds1_like);
  j["psds2_like"] = dump(summary.psds2_like);
  j["collar_f1"] = dump(summary.collar);
  return j.dump(2);
}

std::string summary_table(const std::string& row_label, const EvalSummary& summary) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "model" << std::right << std::setw(12) << "psds1_like"
     << std::setw(12) << "psds2_like" << std::setw(12) << "collar_f1" << "\n";
  os << std::left << std::setw(24) << row_label << std::right << std::fixed
     << std::setprecision(3) << std::setw(12) << summary.psds1_like.macro_f1 << std::setw(12)
     << summary.psds2_like.macro_f1 << std::setw(12) << summary.collar.macro_f1 << "\n";
  return os.str();
}

}  // namespace mfd::eval
