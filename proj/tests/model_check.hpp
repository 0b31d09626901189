#pragma once

// Finite-difference gradient verification over every trainable parameter of
// a CRNN, against the tape gradients. Shared by the unit tests and the
// acceptance suite.

#include <string>

#include "mfd/model.hpp"

namespace testutil {

struct ModelGradReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_coord = 0;
};

inline ModelGradReport model_grad_check(mfd::sed::Crnn& model, const mfd::Tensor& input,
                                        const mfd::Tensor& strong_labels,
                                        const mfd::Tensor& weak_labels, double eps) {
  using namespace mfd;
  auto loss_value = [&]() {
    sed::Prediction pred = model.forward(input, /*training=*/true);
    sed::LossResult loss =
        sed::supervised_loss(pred, strong_labels, weak_labels, {true, true});
    return loss.value;
  };

  NamedTensorList params = model.parameters();
  for (auto& [name, p] : params) p.zero_grad();
  std::vector<std::vector<double>> analytic(params.size());
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss_value());
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    analytic[i] = params[i].second.has_grad() ? params[i].second.grad()
                                              : std::vector<double>(params[i].second.size(), 0.0);

  ModelGradReport report;
  NoTapeScope no_tape;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto& values = p.mutable_values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + eps;
      const double fp = loss_value().item();
      values[j] = saved - eps;
      const double fm = loss_value().item();
      values[j] = saved;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = analytic[i][j];
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
      const double rel = std::fabs(fd - an) / denom;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = params[i].first;
        report.worst_coord = j;
      }
    }
  }
  return report;
}

}  // namespace testutil
