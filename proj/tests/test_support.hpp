#ifndef FLOWALIGN_TEST_SUPPORT_HPP
#define FLOWALIGN_TEST_SUPPORT_HPP

#include "flowalign/flownet.hpp"
#include "flowalign/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace flowalign::testing {

// Narrow network so that finite-difference sweeps over every parameter stay cheap.
inline FlowNetConfig tiny_config(Index in_dim = 2) {
  FlowNetConfig c;
  c.in_dim = in_dim;
  c.hidden = 6;
  c.blocks = 2;
  c.time_embed_dim = 4;
  c.time_scale = 3.0;
  return c;
}

// init_params zeroes the gates and the output layer, which would hide most of the
// network from a gradient check. This fills every tensor with O(1/sqrt(fan_in)) noise.
inline VelocityFieldParams random_params(const FlowNetConfig& config, std::uint64_t seed) {
  Rng rng(seed, 99);
  VelocityFieldParams p = VelocityFieldParams::zeros(config);
  p.for_each_tensor([&rng](DenseMatrix& m) {
    m = rng.normal_matrix(m.rows(), m.cols()) * (0.8 / std::sqrt(static_cast<double>(m.rows())));
  });
  return p;
}

// Flattens parameters to one row so check_gradient can sweep all of them at once.
inline DenseMatrix flatten(const VelocityFieldParams& p) {
  DenseMatrix flat(1, p.parameter_count());
  Index at = 0;
  p.for_each_tensor([&](const DenseMatrix& m) {
    flat.middleCols(at, m.size()) = Eigen::Map<const DenseRowVector>(m.data(), m.size());
    at += m.size();
  });
  return flat;
}

inline VelocityFieldParams unflatten(const DenseMatrix& flat, const FlowNetConfig& config) {
  VelocityFieldParams p = VelocityFieldParams::zeros(config);
  Index at = 0;
  p.for_each_tensor([&](DenseMatrix& m) {
    Eigen::Map<DenseRowVector>(m.data(), m.size()) = flat.middleCols(at, m.size());
    at += m.size();
  });
  return p;
}

// Central-difference gradient, one coordinate at a time.
inline DenseMatrix central_difference_gradient(const DifferentiableFunction& f, const DenseMatrix& x,
                                               double h) {
  DenseMatrix probe = x;
  DenseMatrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double saved = probe.data()[i];
    probe.data()[i] = saved + h;
    const double fp = f(probe, nullptr);
    probe.data()[i] = saved - h;
    const double fm = f(probe, nullptr);
    probe.data()[i] = saved;
    out.data()[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

// Largest gap between analytic and central-difference gradients after allowing for the
// cancellation error of the difference quotient, which is about eps * |f| / h per coordinate.
inline double excess_over_roundoff(const DifferentiableFunction& f, const DenseMatrix& x, double h,
                                   double rel_tol) {
  DenseMatrix analytic;
  const double f0 = f(x, &analytic);
  const DenseMatrix numeric = central_difference_gradient(f, x, h);
  const double noise = 64.0 * std::numeric_limits<double>::epsilon() * (std::abs(f0) + 1.0) / h;
  double worst = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const double a = analytic.data()[i];
    const double n = numeric.data()[i];
    const double allowed = rel_tol * std::max(std::abs(a), std::abs(n)) + noise;
    worst = std::max(worst, std::abs(a - n) / allowed);
  }
  return worst;
}

}  // namespace flowalign::testing

#endif  // FLOWALIGN_TEST_SUPPORT_HPP
