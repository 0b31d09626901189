#include <cmath>
#include <stdexcept>

#include "mfd/tensor.hpp"

namespace mfd {

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           double eps) {
  if (!(eps > 0.0 && eps <= 1e-2))
    throw std::invalid_argument("grad_check: eps must be in (0, 1e-2]");

  Tensor x = point.clone();
  x.set_requires_grad(true);
  std::vector<double> analytic(x.size(), 0.0);
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(x);
    if (y.size() != 1)
      throw std::invalid_argument("grad_check: f must be scalar-valued, got " +
                                  shape_str(y.shape()));
    tape.backward(y);
    if (x.has_grad()) analytic = x.grad();
  }

  GradCheckResult result;
  NoTapeScope no_tape;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = point.clone();
    xp.mutable_values()[i] += eps;
    const double fp = f(xp).item();
    Tensor xm = point.clone();
    xm.mutable_values()[i] -= eps;
    const double fm = f(xm).item();
    const double fd = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::fabs(fd), std::fabs(analytic[i]), 1e-8});
    const double rel = std::fabs(fd - analytic[i]) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_coord = i;
      result.analytic = analytic[i];
      result.numeric = fd;
    }
  }
  return result;
}

}  // namespace mfd
