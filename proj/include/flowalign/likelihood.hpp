#ifndef FLOWALIGN_LIKELIHOOD_HPP
#define FLOWALIGN_LIKELIHOOD_HPP

#include "flowalign/ode.hpp"
#include "flowalign/rng.hpp"
#include "flowalign/velocity_field.hpp"

#include <optional>
#include <vector>

namespace flowalign {

/// Largest dimension for which traces are computed exactly, one pass per basis vector.
constexpr Index kMaxExactTraceDim = 64;

enum class TraceRoute {
  forward,   // d Jacobian-vector products
  backward,  // d vector-Jacobian products
};

/// Exact Tr(dv/dz) at each row of z. Throws for dimensions above kMaxExactTraceDim, where a
/// stochastic estimator would be needed.
DenseVector jacobian_trace(const VelocityField& field, const DenseMatrix& z, const DenseVector& t,
                           TraceRoute route = TraceRoute::forward);

double jacobian_trace(const VelocityField& field, const DenseRowVector& z, double t,
                      TraceRoute route = TraceRoute::forward);

/// log N(x; 0, I) per row.
DenseVector standard_normal_log_density(const DenseMatrix& x);

struct LogLikelihood {
  DenseVector value;
  /// Base points x0 reached by the backward solve.
  DenseMatrix base;
};

/// log p1(y) = log N(x0(y)) - integral of Tr(dv/dz) along the backward trajectory from y at t=1
/// to x0 at t=0. The trace is integrated with the trapezoid rule on the solver's own grid. The
/// direction field of `config` is ignored; the solve always runs backward.
LogLikelihood exact_log_likelihood(const VelocityField& field, const DenseMatrix& y,
                                   const OdeSolveConfig& config);

double exact_log_likelihood(const VelocityField& field, const DenseRowVector& y, const OdeSolveConfig& config);

/// Log-likelihood together with a step-doubling error estimate |L(N) - L(N/2)|, which bounds
/// the error of L(N) whenever the scheme is at least first order and in its asymptotic regime.
struct LogLikelihoodWithError {
  DenseVector value;
  DenseVector quadrature_error;
};

LogLikelihoodWithError exact_log_likelihood_with_error(const VelocityField& field, const DenseMatrix& y,
                                                       const OdeSolveConfig& config);

struct McEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

/// C(y) = -E[Tr(dv/dz)((1-s) x0 + s y, s)] over s ~ U[0,1), x0 ~ N(0, I), per row of y.
std::vector<McEstimate> estimate_C(const VelocityField& field, const DenseMatrix& y, Index mc, Rng& rng);

McEstimate estimate_C(const VelocityField& field, const DenseRowVector& y, Index mc, Rng& rng);

struct ElboReport {
  DenseRowVector y;
  McEstimate c_y;
  McEstimate align_loss;
  double elbo = 0.0;
  double exact_loglik = 0.0;
  double gap = 0.0;
  double quadrature_error = 0.0;

  /// 3 combined Monte Carlo standard errors plus the quadrature error estimate.
  double tolerance() const;
  /// elbo <= exact_loglik + tolerance.
  bool bound_holds() const { return gap >= -tolerance(); }
};

/// C(y), align_loss(y), their difference (lambda = 1) and the exact log-likelihood for every
/// row of y. C and the alignment loss use independent draws from rng.
std::vector<ElboReport> elbo_report(const VelocityField& field, const DenseMatrix& y, Index mc,
                                    const OdeSolveConfig& config, Rng& rng);

ElboReport elbo_report(const VelocityField& field, const DenseRowVector& y, Index mc,
                       const OdeSolveConfig& config, Rng& rng);

/// Distances below this are floored before taking the log.
constexpr double kKnnDistanceFloor = 1e-12;

/// log of the Euclidean distance from each query to its k-th nearest dataset row, by brute
/// force. Ties are broken by dataset index.
DenseVector knn_log_distance(const DenseMatrix& dataset, const DenseMatrix& queries, Index k);

/// Pearson correlation, or nullopt when either column is constant.
std::optional<double> pearson(const DenseVector& a, const DenseVector& b);

/// Spearman rank correlation with average ranks for ties, or nullopt when either column is
/// constant.
std::optional<double> spearman(const DenseVector& a, const DenseVector& b);

/// Ranks starting at 1, ties sharing their average rank.
DenseVector average_ranks(const DenseVector& values);

/// Largest spectral norm of dv/dz over the probe points, an empirical Lipschitz constant.
double lipschitz_probe(const VelocityField& field, const DenseMatrix& z, const DenseVector& t);

struct PairOrdering {
  Index qualifying = 0;
  Index consistent = 0;
  double fraction() const { return qualifying == 0 ? 1.0 : static_cast<double>(consistent) / qualifying; }
};

/// Over all pairs whose alignment-loss difference exceeds lipschitz * d * |y_i - y_j| / 2,
/// counts how often the exact log-likelihood orders the pair the same way as the ELBO.
PairOrdering elbo_ordering_consistency(const DenseMatrix& y, const DenseVector& align_loss,
                                       const DenseVector& elbo, const DenseVector& exact_loglik,
                                       double lipschitz);

}  // namespace flowalign

#endif  // FLOWALIGN_LIKELIHOOD_HPP
