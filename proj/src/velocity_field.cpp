#include "flowalign/velocity_field.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace flowalign {

void VelocityField::check_batch(const DenseMatrix& z, const DenseVector& t, const char* who) const {
  if (z.cols() != dim()) {
    throw std::invalid_argument(std::string(who) + ": expected " + std::to_string(dim()) +
                                " columns, got " + shape_string(z));
  }
  if (t.size() != z.rows()) {
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(t.size()) +
                                " times for " + std::to_string(z.rows()) + " rows");
  }
  for (Index i = 0; i < t.size(); ++i) {
    if (!(t[i] >= 0.0 && t[i] <= 1.0)) {
      throw std::invalid_argument(std::string(who) + ": time " + std::to_string(t[i]) +
                                  " outside [0, 1]");
    }
  }
}

DenseMatrix VelocityField::velocity_and_pullback(
    const DenseMatrix& z, const DenseVector& t,
    const std::function<DenseMatrix(const DenseMatrix&)>& upstream_of, DenseMatrix* grad_z) const {
  DenseMatrix v = velocity(z, t);
  if (grad_z != nullptr) *grad_z = input_gradient(z, t, upstream_of(v));
  return v;
}

DenseVector VelocityField::divergence(const DenseMatrix& z, const DenseVector& t) const {
  DenseVector trace = DenseVector::Zero(z.rows());
  DenseMatrix basis = DenseMatrix::Zero(z.rows(), dim());
  for (Index k = 0; k < dim(); ++k) {
    basis.col(k).setOnes();
    trace += tangent(z, t, basis).col(k);
    basis.col(k).setZero();
  }
  return trace;
}

DenseVector VelocityField::divergence_by_pullback(const DenseMatrix& z, const DenseVector& t) const {
  DenseVector trace = DenseVector::Zero(z.rows());
  DenseMatrix basis = DenseMatrix::Zero(z.rows(), dim());
  for (Index k = 0; k < dim(); ++k) {
    basis.col(k).setOnes();
    trace += input_gradient(z, t, basis).col(k);
    basis.col(k).setZero();
  }
  return trace;
}

// ---------------------------------------------------------------------------

DenseMatrix ZeroField::velocity(const DenseMatrix& z, const DenseVector& t) const {
  check_batch(z, t, "ZeroField");
  return DenseMatrix::Zero(z.rows(), dim_);
}

DenseMatrix ZeroField::input_gradient(const DenseMatrix& z, const DenseVector& t,
                                      const DenseMatrix&) const {
  check_batch(z, t, "ZeroField");
  return DenseMatrix::Zero(z.rows(), dim_);
}

DenseMatrix ZeroField::tangent(const DenseMatrix& z, const DenseVector& t, const DenseMatrix&) const {
  check_batch(z, t, "ZeroField");
  return DenseMatrix::Zero(z.rows(), dim_);
}

DenseMatrix ConstantField::velocity(const DenseMatrix& z, const DenseVector& t) const {
  check_batch(z, t, "ConstantField");
  return c_.replicate(z.rows(), 1);
}

DenseMatrix ConstantField::input_gradient(const DenseMatrix& z, const DenseVector& t,
                                          const DenseMatrix&) const {
  check_batch(z, t, "ConstantField");
  return DenseMatrix::Zero(z.rows(), dim());
}

DenseMatrix ConstantField::tangent(const DenseMatrix& z, const DenseVector& t,
                                   const DenseMatrix&) const {
  check_batch(z, t, "ConstantField");
  return DenseMatrix::Zero(z.rows(), dim());
}

LinearField::LinearField(DenseMatrix a, DenseRowVector b) : a_(std::move(a)), b_(std::move(b)) {
  if (a_.rows() != a_.cols() || b_.size() != a_.rows()) {
    throw std::invalid_argument("LinearField: need square A and matching b, got " +
                                shape_string(a_) + " and " + std::to_string(b_.size()));
  }
}

LinearField LinearField::identity(Index dim) {
  return LinearField(DenseMatrix::Identity(dim, dim), DenseRowVector::Zero(dim));
}

DenseMatrix LinearField::velocity(const DenseMatrix& z, const DenseVector& t) const {
  check_batch(z, t, "LinearField");
  DenseMatrix v = z * a_.transpose();
  v.rowwise() += b_;
  return v;
}

DenseMatrix LinearField::input_gradient(const DenseMatrix& z, const DenseVector& t,
                                        const DenseMatrix& upstream) const {
  check_batch(z, t, "LinearField");
  return upstream * a_;
}

DenseMatrix LinearField::tangent(const DenseMatrix& z, const DenseVector& t,
                                 const DenseMatrix& dz) const {
  check_batch(z, t, "LinearField");
  return dz * a_.transpose();
}

PointTargetField::PointTargetField(DenseRowVector target, double t_cap)
    : target_(std::move(target)), t_cap_(t_cap) {
  if (!(t_cap_ >= 0.0 && t_cap_ < 1.0)) {
    throw std::invalid_argument("PointTargetField: cap must lie in [0, 1)");
  }
}

DenseVector PointTargetField::rate(const DenseVector& t) const {
  return t.unaryExpr([this](double s) { return 1.0 / (1.0 - std::min(s, t_cap_)); });
}

DenseMatrix PointTargetField::velocity(const DenseMatrix& z, const DenseVector& t) const {
  check_batch(z, t, "PointTargetField");
  DenseMatrix diff = (-z).rowwise() + target_;
  return rate(t).asDiagonal() * diff;
}

DenseMatrix PointTargetField::input_gradient(const DenseMatrix& z, const DenseVector& t,
                                             const DenseMatrix& upstream) const {
  check_batch(z, t, "PointTargetField");
  return -(rate(t).asDiagonal() * upstream);
}

DenseMatrix PointTargetField::tangent(const DenseMatrix& z, const DenseVector& t,
                                      const DenseMatrix& dz) const {
  check_batch(z, t, "PointTargetField");
  return -(rate(t).asDiagonal() * dz);
}

GaussianOptimalField::GaussianOptimalField(DenseRowVector mean, double target_std)
    : mean_(std::move(mean)), s2_(target_std * target_std) {
  if (!(target_std > 0.0)) throw std::invalid_argument("GaussianOptimalField: std must be > 0");
}

double GaussianOptimalField::gain(double t) const {
  const double u = 1.0 - t;
  return (t * s2_ - u) / (u * u + t * t * s2_);
}

DenseMatrix GaussianOptimalField::velocity(const DenseMatrix& z, const DenseVector& t) const {
  check_batch(z, t, "GaussianOptimalField");
  DenseMatrix v(z.rows(), dim());
  for (Index i = 0; i < z.rows(); ++i) {
    v.row(i) = mean_ + gain(t[i]) * (z.row(i) - t[i] * mean_);
  }
  return v;
}

DenseMatrix GaussianOptimalField::input_gradient(const DenseMatrix& z, const DenseVector& t,
                                                 const DenseMatrix& upstream) const {
  check_batch(z, t, "GaussianOptimalField");
  DenseVector k = t.unaryExpr([this](double s) { return gain(s); });
  return k.asDiagonal() * upstream;
}

DenseMatrix GaussianOptimalField::tangent(const DenseMatrix& z, const DenseVector& t,
                                          const DenseMatrix& dz) const {
  return input_gradient(z, t, dz);
}

MixtureOptimalField::MixtureOptimalField(DenseMatrix means, double component_std)
    : means_(std::move(means)), s2_(component_std * component_std) {
  if (means_.rows() < 1) throw std::invalid_argument("MixtureOptimalField: need a component");
  if (!(component_std > 0.0)) throw std::invalid_argument("MixtureOptimalField: std must be > 0");
}

MixtureOptimalField::Point MixtureOptimalField::evaluate(const DenseRowVector& z, double t,
                                                         bool with_jacobian) const {
  const double u = 1.0 - t;
  const double var = u * u + t * t * s2_;
  Point p;
  p.gain = (t * s2_ - u) / var;

  // Posterior over components given z_t = z: z | k ~ N(t mean_k, var I).
  DenseMatrix centred = (-(t * means_)).rowwise() + z;  // z - t mean_k
  DenseVector logits = -centred.rowwise().squaredNorm() / (2.0 * var);
  const double top = logits.maxCoeff();
  DenseVector w = (logits.array() - top).exp().matrix();
  w /= w.sum();

  p.component_v = means_ + p.gain * centred;
  p.v = w.transpose() * p.component_v;
  if (with_jacobian) {
    // grad log N_k = -(z - t mean_k) / var; grad w_k = w_k (g_k - sum_j w_j g_j).
    const DenseMatrix g = -centred / var;
    const DenseRowVector g_bar = w.transpose() * g;
    p.weight_grad = w.asDiagonal() * (g.rowwise() - g_bar);
  }
  return p;
}

DenseMatrix MixtureOptimalField::velocity(const DenseMatrix& z, const DenseVector& t) const {
  check_batch(z, t, "MixtureOptimalField");
  DenseMatrix v(z.rows(), dim());
  for (Index i = 0; i < z.rows(); ++i) v.row(i) = evaluate(z.row(i), t[i], false).v;
  return v;
}

DenseMatrix MixtureOptimalField::input_gradient(const DenseMatrix& z, const DenseVector& t,
                                                const DenseMatrix& upstream) const {
  check_batch(z, t, "MixtureOptimalField");
  DenseMatrix out(z.rows(), dim());
  for (Index i = 0; i < z.rows(); ++i) {
    const Point p = evaluate(z.row(i), t[i], true);
    // J = gain I + sum_k v_k grad w_k^T, so J^T u = gain u + sum_k grad w_k (v_k . u).
    const DenseVector proj = p.component_v * upstream.row(i).transpose();
    out.row(i) = p.gain * upstream.row(i) + proj.transpose() * p.weight_grad;
  }
  return out;
}

DenseMatrix MixtureOptimalField::tangent(const DenseMatrix& z, const DenseVector& t,
                                         const DenseMatrix& dz) const {
  check_batch(z, t, "MixtureOptimalField");
  DenseMatrix out(z.rows(), dim());
  for (Index i = 0; i < z.rows(); ++i) {
    const Point p = evaluate(z.row(i), t[i], true);
    const DenseVector dw = p.weight_grad * dz.row(i).transpose();
    out.row(i) = p.gain * dz.row(i) + dw.transpose() * p.component_v;
  }
  return out;
}

}  // namespace flowalign
