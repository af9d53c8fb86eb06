#ifndef FLOWALIGN_VELOCITY_FIELD_HPP
#define FLOWALIGN_VELOCITY_FIELD_HPP

#include "flowalign/numerics.hpp"

#include <functional>

namespace flowalign {

/// Time-dependent vector field v(z, t) on R^d, evaluated row-wise over a batch.
/// Row i of every batch argument is paired with t[i].
class VelocityField {
 public:
  virtual ~VelocityField() = default;

  virtual Index dim() const = 0;

  virtual DenseMatrix velocity(const DenseMatrix& z, const DenseVector& t) const = 0;

  /// Row i holds J_i^T u_i, where J_i = dv/dz at (z_i, t_i).
  virtual DenseMatrix input_gradient(const DenseMatrix& z, const DenseVector& t,
                                     const DenseMatrix& upstream) const = 0;

  /// Row i holds J_i dz_i.
  virtual DenseMatrix tangent(const DenseMatrix& z, const DenseVector& t,
                              const DenseMatrix& dz) const = 0;

  /// Evaluates v, maps it through `upstream_of`, and pulls the result back to z.
  /// Implementations may share the forward pass between the two halves.
  virtual DenseMatrix velocity_and_pullback(
      const DenseMatrix& z, const DenseVector& t,
      const std::function<DenseMatrix(const DenseMatrix&)>& upstream_of, DenseMatrix* grad_z) const;

  /// Per-row Tr(dv/dz), one tangent per basis direction.
  virtual DenseVector divergence(const DenseMatrix& z, const DenseVector& t) const;

  /// Per-row Tr(dv/dz), one input-gradient pass per basis covector.
  DenseVector divergence_by_pullback(const DenseMatrix& z, const DenseVector& t) const;

 protected:
  void check_batch(const DenseMatrix& z, const DenseVector& t, const char* who) const;
};

// Closed-form fields used as oracles.

/// v = 0.
class ZeroField final : public VelocityField {
 public:
  explicit ZeroField(Index dim) : dim_(dim) {}
  Index dim() const override { return dim_; }
  DenseMatrix velocity(const DenseMatrix& z, const DenseVector& t) const override;
  DenseMatrix input_gradient(const DenseMatrix& z, const DenseVector& t,
                             const DenseMatrix& upstream) const override;
  DenseMatrix tangent(const DenseMatrix& z, const DenseVector& t, const DenseMatrix& dz) const override;

 private:
  Index dim_;
};

/// v = c.
class ConstantField final : public VelocityField {
 public:
  explicit ConstantField(DenseRowVector c) : c_(std::move(c)) {}
  Index dim() const override { return c_.size(); }
  DenseMatrix velocity(const DenseMatrix& z, const DenseVector& t) const override;
  DenseMatrix input_gradient(const DenseMatrix& z, const DenseVector& t,
                             const DenseMatrix& upstream) const override;
  DenseMatrix tangent(const DenseMatrix& z, const DenseVector& t, const DenseMatrix& dz) const override;

 private:
  DenseRowVector c_;
};

/// v = A z + b (row form: z A^T + b). v = z is LinearField::identity(d).
class LinearField final : public VelocityField {
 public:
  LinearField(DenseMatrix a, DenseRowVector b);
  static LinearField identity(Index dim);
  Index dim() const override { return a_.rows(); }
  DenseMatrix velocity(const DenseMatrix& z, const DenseVector& t) const override;
  DenseMatrix input_gradient(const DenseMatrix& z, const DenseVector& t,
                             const DenseMatrix& upstream) const override;
  DenseMatrix tangent(const DenseMatrix& z, const DenseVector& t, const DenseMatrix& dz) const override;

 private:
  DenseMatrix a_;
  DenseRowVector b_;
};

/// v = (a - z) / (1 - min(t, cap)): every straight path ending at `a` is an integral curve.
class PointTargetField final : public VelocityField {
 public:
  explicit PointTargetField(DenseRowVector target, double t_cap = 0.99);
  Index dim() const override { return target_.size(); }
  DenseMatrix velocity(const DenseMatrix& z, const DenseVector& t) const override;
  DenseMatrix input_gradient(const DenseMatrix& z, const DenseVector& t,
                             const DenseMatrix& upstream) const override;
  DenseMatrix tangent(const DenseMatrix& z, const DenseVector& t, const DenseMatrix& dz) const override;

 private:
  DenseVector rate(const DenseVector& t) const;
  DenseRowVector target_;
  double t_cap_;
};

/// Exact minimizer of the flow-matching loss for the target N(mean, s^2 I) and base N(0, I):
/// v(z, t) = mean + k(t) (z - t mean), k(t) = (t s^2 - (1 - t)) / ((1 - t)^2 + t^2 s^2).
/// Its time-one density is exactly N(mean, s^2 I).
class GaussianOptimalField final : public VelocityField {
 public:
  GaussianOptimalField(DenseRowVector mean, double target_std);
  Index dim() const override { return mean_.size(); }
  DenseMatrix velocity(const DenseMatrix& z, const DenseVector& t) const override;
  DenseMatrix input_gradient(const DenseMatrix& z, const DenseVector& t,
                             const DenseMatrix& upstream) const override;
  DenseMatrix tangent(const DenseMatrix& z, const DenseVector& t, const DenseMatrix& dz) const override;

  double gain(double t) const;

 private:
  DenseRowVector mean_;
  double s2_;
};

/// Exact minimizer of the flow-matching loss for an equal-weight mixture of isotropic Gaussians
/// N(mean_k, s^2 I): the posterior-weighted average of the per-component Gaussian fields.
/// Its time-one density is exactly the mixture, which makes it a likelihood oracle.
class MixtureOptimalField final : public VelocityField {
 public:
  MixtureOptimalField(DenseMatrix means, double component_std);
  Index dim() const override { return means_.cols(); }
  DenseMatrix velocity(const DenseMatrix& z, const DenseVector& t) const override;
  DenseMatrix input_gradient(const DenseMatrix& z, const DenseVector& t,
                             const DenseMatrix& upstream) const override;
  DenseMatrix tangent(const DenseMatrix& z, const DenseVector& t, const DenseMatrix& dz) const override;

 private:
  struct Point {
    DenseRowVector v;
    double gain;
    DenseMatrix component_v;     // K x d
    DenseMatrix weight_grad;     // K x d, rows are grad_z w_k
  };
  Point evaluate(const DenseRowVector& z, double t, bool with_jacobian) const;

  DenseMatrix means_;
  double s2_;
};

}  // namespace flowalign

#endif  // FLOWALIGN_VELOCITY_FIELD_HPP
