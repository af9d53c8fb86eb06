#ifndef FLOWALIGN_NUMERICS_HPP
#define FLOWALIGN_NUMERICS_HPP

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>

namespace flowalign {

using Index = Eigen::Index;

/// Row-major dense matrix; rows are samples, columns are features.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Column vector, used for per-row scalars (times, losses, log-densities).
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Row vector, used for biases broadcast over rows.
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using DenseMatrix = Matrix<double>;
using DenseVector = Vector<double>;
using DenseRowVector = RowVector<double>;

/// Raised when a computation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Derived>
std::string shape_string(const Eigen::EigenBase<Derived>& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

template <typename Derived>
void ensure_finite(const Eigen::DenseBase<Derived>& m, const std::string& what) {
  if (!m.allFinite()) {
    throw NumericError(what + ": non-finite entry in " + shape_string(m.derived()) + " matrix");
  }
}

#ifdef NDEBUG
#define FLOWALIGN_DEBUG_FINITE(m, what) ((void)0)
#else
#define FLOWALIGN_DEBUG_FINITE(m, what) ::flowalign::ensure_finite((m), (what))
#endif

/// Builds a matrix from row-major data, rejecting mismatched lengths and non-finite entries.
inline DenseMatrix make_matrix(Index rows, Index cols, std::span<const double> data) {
  if (rows < 0 || cols < 0 || static_cast<Index>(data.size()) != rows * cols) {
    throw std::invalid_argument("make_matrix: data length " + std::to_string(data.size()) +
                                " does not match " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
  DenseMatrix m = Eigen::Map<const DenseMatrix>(data.data(), rows, cols);
  ensure_finite(m, "make_matrix");
  return m;
}

template <typename DerivedA, typename DerivedB>
auto matmul(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_string(a.derived()) + " x " +
                                shape_string(b.derived()));
  }
  Matrix<Scalar> out(a.rows(), b.cols());
  out.noalias() = a * b;
  FLOWALIGN_DEBUG_FINITE(out, "matmul");
  return out;
}

// ---------------------------------------------------------------------------
// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))

namespace detail {
template <typename Scalar>
constexpr Scalar kGeluC = Scalar(0.7978845608028654);  // sqrt(2/pi)
template <typename Scalar>
constexpr Scalar kGeluA = Scalar(0.044715);

// 0.5 (1 + tanh(u)) equals the logistic sigmoid of 2u. Evaluating it that way keeps full
// relative precision in the far negative tail, where 1 + tanh(u) cancels.
template <typename Scalar>
inline Scalar sigmoid(Scalar v) {
  if (v >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
inline Scalar gelu_scalar(Scalar x) {
  const Scalar u = kGeluC<Scalar> * (x + kGeluA<Scalar> * x * x * x);
  return x * sigmoid(Scalar(2) * u);
}

template <typename Scalar>
inline Scalar gelu_derivative_scalar(Scalar x) {
  const Scalar x2 = x * x;
  const Scalar u = kGeluC<Scalar> * (x + kGeluA<Scalar> * x2 * x);
  const Scalar s = sigmoid(Scalar(2) * u);
  const Scalar s_neg = sigmoid(Scalar(-2) * u);  // 1 - s without cancellation
  const Scalar du = kGeluC<Scalar> * (Scalar(1) + Scalar(3) * kGeluA<Scalar> * x2);
  return s + Scalar(2) * x * s * s_neg * du;
}
}  // namespace detail

template <typename Derived>
auto gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return Matrix<Scalar>(x.unaryExpr([](Scalar v) { return detail::gelu_scalar(v); }));
}

/// Elementwise dGELU/dx.
template <typename Derived>
auto gelu_derivative(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return Matrix<Scalar>(x.unaryExpr([](Scalar v) { return detail::gelu_derivative_scalar(v); }));
}

/// upstream ⊙ dGELU/dx evaluated at x.
template <typename DerivedX, typename DerivedU>
auto gelu_backward(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedU>& upstream) {
  using Scalar = typename DerivedX::Scalar;
  if (x.rows() != upstream.rows() || x.cols() != upstream.cols()) {
    throw std::invalid_argument("gelu_backward: shape mismatch " + shape_string(x.derived()) +
                                " vs " + shape_string(upstream.derived()));
  }
  return Matrix<Scalar>(gelu_derivative(x).cwiseProduct(upstream));
}

// ---------------------------------------------------------------------------
// Layer normalization over the feature axis, no affine.

constexpr double kLayerNormEps = 1e-5;

/// Normalized output plus the per-row inverse standard deviation, kept for backward/tangent.
template <typename Scalar>
struct LayerNormResult {
  Matrix<Scalar> normalized;
  Vector<Scalar> inv_std;
};

template <typename Derived>
LayerNormResult<typename Derived::Scalar> layer_norm_forward(const Eigen::MatrixBase<Derived>& x,
                                                             double eps = kLayerNormEps) {
  using Scalar = typename Derived::Scalar;
  if (x.cols() < 2) {
    throw std::invalid_argument("layer_norm: need at least 2 columns, got " +
                                std::to_string(x.cols()));
  }
  const Scalar n = static_cast<Scalar>(x.cols());
  LayerNormResult<Scalar> out;
  const Vector<Scalar> mean = x.rowwise().sum() / n;
  out.normalized = x.colwise() - mean;
  const Vector<Scalar> var = out.normalized.rowwise().squaredNorm() / n;
  out.inv_std = (var.array() + Scalar(eps)).rsqrt().matrix();
  out.normalized = out.inv_std.asDiagonal() * out.normalized;
  return out;
}

template <typename Derived>
auto layer_norm(const Eigen::MatrixBase<Derived>& x, double eps = kLayerNormEps) {
  return layer_norm_forward(x, eps).normalized;
}

/// Given dL/dy for y = LN(x), returns dL/dx. Shares its algebra with the tangent map
/// because the normalization Jacobian is symmetric.
template <typename Scalar, typename DerivedU>
Matrix<Scalar> layer_norm_backward(const LayerNormResult<Scalar>& fwd,
                                   const Eigen::MatrixBase<DerivedU>& upstream) {
  const auto& y = fwd.normalized;
  if (y.rows() != upstream.rows() || y.cols() != upstream.cols()) {
    throw std::invalid_argument("layer_norm_backward: shape mismatch " + shape_string(y) + " vs " +
                                shape_string(upstream.derived()));
  }
  const Scalar n = static_cast<Scalar>(y.cols());
  const Vector<Scalar> mean_u = upstream.rowwise().sum() / n;
  const Vector<Scalar> mean_uy = upstream.cwiseProduct(y).rowwise().sum() / n;
  Matrix<Scalar> dx = upstream;
  dx.colwise() -= mean_u;
  dx -= mean_uy.asDiagonal() * y;
  return fwd.inv_std.asDiagonal() * dx;
}

template <typename Derived, typename DerivedU>
auto layer_norm_backward(const Eigen::MatrixBase<Derived>& x, const Eigen::MatrixBase<DerivedU>& upstream,
                         double eps = kLayerNormEps) {
  return layer_norm_backward(layer_norm_forward(x, eps), upstream);
}

/// Directional derivative of LN at x along dx.
template <typename Scalar, typename DerivedD>
Matrix<Scalar> layer_norm_tangent(const LayerNormResult<Scalar>& fwd,
                                  const Eigen::MatrixBase<DerivedD>& dx) {
  return layer_norm_backward(fwd, dx);
}

// ---------------------------------------------------------------------------

/// Neumaier-compensated running sum; order-insensitive to ~1 ulp of the total.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

/// Scalar objective that writes its analytic gradient into `grad` when non-null.
using DifferentiableFunction = std::function<double(const DenseMatrix& x, DenseMatrix* grad)>;

/// Worst per-coordinate relative error between the analytic gradient of f at x and central
/// differences with step h. The denominator is floored at 1e-8.
double check_gradient(const DifferentiableFunction& f, const DenseMatrix& x, double h = 1e-5);

}  // namespace flowalign

#endif  // FLOWALIGN_NUMERICS_HPP
