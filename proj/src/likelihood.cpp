#include "flowalign/likelihood.hpp"

#include "flowalign/align.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace flowalign {

namespace {

constexpr Index kRowsPerChunk = 8192;

void require_traceable(const VelocityField& field) {
  if (field.dim() > kMaxExactTraceDim) {
    throw std::invalid_argument("jacobian_trace: dimension " + std::to_string(field.dim()) +
                                " exceeds " + std::to_string(kMaxExactTraceDim) +
                                "; exact traces are unsupported here, use a stochastic trace estimator");
  }
}

McEstimate summarize(const DenseVector& samples) {
  McEstimate e;
  const double n = static_cast<double>(samples.size());
  e.mean = samples.mean();
  if (samples.size() > 1) {
    const double var = (samples.array() - e.mean).square().sum() / (n - 1.0);
    e.standard_error = std::sqrt(var / n);
  }
  return e;
}

}  // namespace

DenseVector jacobian_trace(const VelocityField& field, const DenseMatrix& z, const DenseVector& t,
                           TraceRoute route) {
  require_traceable(field);
  return route == TraceRoute::forward ? field.divergence(z, t) : field.divergence_by_pullback(z, t);
}

double jacobian_trace(const VelocityField& field, const DenseRowVector& z, double t, TraceRoute route) {
  return jacobian_trace(field, DenseMatrix(z), DenseVector::Constant(1, t), route)[0];
}

DenseVector standard_normal_log_density(const DenseMatrix& x) {
  const double log_norm = 0.5 * static_cast<double>(x.cols()) * std::log(2.0 * std::numbers::pi);
  return (-0.5 * x.rowwise().squaredNorm().array() - log_norm).matrix();
}

LogLikelihood exact_log_likelihood(const VelocityField& field, const DenseMatrix& y,
                                   const OdeSolveConfig& config) {
  require_traceable(field);
  OdeSolveConfig backward = config;
  backward.direction = OdeDirection::backward;
  backward.validate();

  const double h = 1.0 / static_cast<double>(backward.steps);
  DenseVector integral = DenseVector::Zero(y.rows());
  LogLikelihood out;
  out.base = integrate(field, y, backward, [&](Index node, double t, const DenseMatrix& state) {
    const double w = (node == 0 || node == backward.steps) ? 0.5 * h : h;
    integral += w * field.divergence(state, DenseVector::Constant(state.rows(), t));
  });
  out.value = standard_normal_log_density(out.base) - integral;
  ensure_finite(out.value, "exact_log_likelihood");
  return out;
}

double exact_log_likelihood(const VelocityField& field, const DenseRowVector& y, const OdeSolveConfig& config) {
  return exact_log_likelihood(field, DenseMatrix(y), config).value[0];
}

LogLikelihoodWithError exact_log_likelihood_with_error(const VelocityField& field, const DenseMatrix& y,
                                                       const OdeSolveConfig& config) {
  LogLikelihoodWithError out;
  out.value = exact_log_likelihood(field, y, config).value;
  OdeSolveConfig other = config;
  other.steps = config.steps >= 2 ? config.steps / 2 : 2;
  out.quadrature_error = (exact_log_likelihood(field, y, other).value - out.value).cwiseAbs();
  return out;
}

std::vector<McEstimate> estimate_C(const VelocityField& field, const DenseMatrix& y, Index mc, Rng& rng) {
  if (mc < 1) throw std::invalid_argument("estimate_C: mc must be >= 1");
  if (y.cols() != field.dim()) {
    throw std::invalid_argument("estimate_C: points " + shape_string(y) + " do not match field dim " +
                                std::to_string(field.dim()));
  }
  require_traceable(field);
  const Index d = y.cols();
  std::vector<McEstimate> out;
  out.reserve(static_cast<std::size_t>(y.rows()));
  for (Index i = 0; i < y.rows(); ++i) {
    DenseVector neg_trace(mc);
    for (Index first = 0; first < mc; first += kRowsPerChunk) {
      const Index rows = std::min(kRowsPerChunk, mc - first);
      const DenseMatrix x0 = rng.normal_matrix(rows, d);
      const DenseVector s = rng.uniform_vector(rows);
      const DenseMatrix z = (1.0 - s.array()).matrix().asDiagonal() * x0 + s * y.row(i);
      neg_trace.segment(first, rows) = -field.divergence(z, s);
    }
    ensure_finite(neg_trace, "estimate_C");
    out.push_back(summarize(neg_trace));
  }
  return out;
}

McEstimate estimate_C(const VelocityField& field, const DenseRowVector& y, Index mc, Rng& rng) {
  return estimate_C(field, DenseMatrix(y), mc, rng).front();
}

double ElboReport::tolerance() const {
  return 3.0 * std::hypot(c_y.standard_error, align_loss.standard_error) + quadrature_error;
}

std::vector<ElboReport> elbo_report(const VelocityField& field, const DenseMatrix& y, Index mc,
                                    const OdeSolveConfig& config, Rng& rng) {
  const std::vector<McEstimate> c = estimate_C(field, y, mc, rng);
  const LogLikelihoodWithError exact = exact_log_likelihood_with_error(field, y, config);
  std::vector<ElboReport> out;
  out.reserve(c.size());
  for (Index i = 0; i < y.rows(); ++i) {
    ElboReport r;
    r.y = y.row(i);
    r.c_y = c[static_cast<std::size_t>(i)];
    const AlignLossResult a = align_loss(field, y.row(i), mc, rng, false);
    r.align_loss = {a.loss[0], a.standard_error[0]};
    r.elbo = r.c_y.mean - r.align_loss.mean;
    r.exact_loglik = exact.value[i];
    r.quadrature_error = exact.quadrature_error[i];
    r.gap = r.exact_loglik - r.elbo;
    out.push_back(r);
  }
  return out;
}

ElboReport elbo_report(const VelocityField& field, const DenseRowVector& y, Index mc,
                       const OdeSolveConfig& config, Rng& rng) {
  return elbo_report(field, DenseMatrix(y), mc, config, rng).front();
}

DenseVector knn_log_distance(const DenseMatrix& dataset, const DenseMatrix& queries, Index k) {
  const Index n = dataset.rows();
  if (k < 1 || k > n) {
    throw std::invalid_argument("knn_log_distance: k = " + std::to_string(k) + " outside [1, " +
                                std::to_string(n) + "]");
  }
  if (dataset.cols() != queries.cols()) {
    throw std::invalid_argument("knn_log_distance: dataset " + shape_string(dataset) + " and queries " +
                                shape_string(queries) + " differ in dimension");
  }
  DenseVector out(queries.rows());
  std::vector<std::pair<double, Index>> dist(static_cast<std::size_t>(n));
  for (Index q = 0; q < queries.rows(); ++q) {
    for (Index j = 0; j < n; ++j) {
      dist[static_cast<std::size_t>(j)] = {(dataset.row(j) - queries.row(q)).squaredNorm(), j};
    }
    auto kth = dist.begin() + (k - 1);
    std::nth_element(dist.begin(), kth, dist.end());
    out[q] = std::log(std::max(std::sqrt(kth->first), kKnnDistanceFloor));
  }
  return out;
}

std::optional<double> pearson(const DenseVector& a, const DenseVector& b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("pearson: need two columns of equal length >= 2");
  }
  const DenseVector da = a.array() - a.mean();
  const DenseVector db = b.array() - b.mean();
  const double saa = da.squaredNorm();
  const double sbb = db.squaredNorm();
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(da.dot(db) / std::sqrt(saa * sbb), -1.0, 1.0);
}

DenseVector average_ranks(const DenseVector& values) {
  const Index n = values.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) { return values[i] < values[j]; });
  DenseVector ranks(n);
  for (Index lo = 0; lo < n;) {
    Index hi = lo;
    while (hi + 1 < n && values[order[static_cast<std::size_t>(hi + 1)]] == values[order[static_cast<std::size_t>(lo)]]) ++hi;
    const double rank = 0.5 * static_cast<double>(lo + hi) + 1.0;
    for (Index i = lo; i <= hi; ++i) ranks[order[static_cast<std::size_t>(i)]] = rank;
    lo = hi + 1;
  }
  return ranks;
}

std::optional<double> spearman(const DenseVector& a, const DenseVector& b) {
  return pearson(average_ranks(a), average_ranks(b));
}

double lipschitz_probe(const VelocityField& field, const DenseMatrix& z, const DenseVector& t) {
  const Index d = field.dim();
  std::vector<DenseMatrix> columns;
  DenseMatrix basis = DenseMatrix::Zero(z.rows(), d);
  for (Index k = 0; k < d; ++k) {
    basis.col(k).setOnes();
    columns.push_back(field.tangent(z, t, basis));
    basis.col(k).setZero();
  }
  double worst = 0.0;
  Eigen::MatrixXd jac(d, d);
  for (Index i = 0; i < z.rows(); ++i) {
    for (Index k = 0; k < d; ++k) jac.col(k) = columns[static_cast<std::size_t>(k)].row(i).transpose();
    worst = std::max(worst, Eigen::JacobiSVD<Eigen::MatrixXd>(jac).singularValues()(0));
  }
  return worst;
}

PairOrdering elbo_ordering_consistency(const DenseMatrix& y, const DenseVector& align_loss,
                                       const DenseVector& elbo, const DenseVector& exact_loglik,
                                       double lipschitz) {
  const Index n = y.rows();
  if (align_loss.size() != n || elbo.size() != n || exact_loglik.size() != n) {
    throw std::invalid_argument("elbo_ordering_consistency: column lengths differ");
  }
  const double d = static_cast<double>(y.cols());
  PairOrdering out;
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      const double bound = lipschitz * d * (y.row(i) - y.row(j)).norm() / 2.0;
      if (std::abs(align_loss[i] - align_loss[j]) <= bound) continue;
      ++out.qualifying;
      if ((elbo[i] - elbo[j]) * (exact_loglik[i] - exact_loglik[j]) > 0.0) ++out.consistent;
    }
  }
  return out;
}

}  // namespace flowalign
