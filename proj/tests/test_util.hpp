#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mfd/rng.hpp"
#include "mfd/tensor.hpp"

namespace testutil {

inline mfd::Tensor random_tensor(mfd::Shape shape, mfd::Rng& rng, double lo = -1.0,
                                 double hi = 1.0) {
  mfd::Tensor t(shape, 0.0);
  for (double& v : t.mutable_values()) v = rng.uniform(lo, hi);
  return t;
}

// Random values bounded away from zero (for ops with a kink at 0).
inline mfd::Tensor random_tensor_nonzero(mfd::Shape shape, mfd::Rng& rng, double min_abs = 0.05) {
  mfd::Tensor t(shape, 0.0);
  for (double& v : t.mutable_values()) {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    v = sign * rng.uniform(min_abs, 1.0);
  }
  return t;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace testutil
