#include "flowalign/numerics.hpp"

#include <algorithm>

namespace flowalign {

double check_gradient(const DifferentiableFunction& f, const DenseMatrix& x, double h) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("check_gradient: step h must be positive");
  }
  DenseMatrix analytic = DenseMatrix::Zero(x.rows(), x.cols());
  const double f0 = f(x, &analytic);
  if (!std::isfinite(f0)) {
    throw NumericError("check_gradient: f(x) is not finite");
  }
  if (analytic.rows() != x.rows() || analytic.cols() != x.cols()) {
    throw std::invalid_argument("check_gradient: gradient shape " + shape_string(analytic) +
                                " does not match input " + shape_string(x));
  }

  DenseMatrix probe = x;
  double worst = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const double saved = probe.data()[i];
    probe.data()[i] = saved + h;
    const double fp = f(probe, nullptr);
    probe.data()[i] = saved - h;
    const double fm = f(probe, nullptr);
    probe.data()[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("check_gradient: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic.data()[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace flowalign
