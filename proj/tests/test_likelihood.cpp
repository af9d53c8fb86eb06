#include "flowalign/distributions.hpp"
#include "flowalign/flownet.hpp"
#include "flowalign/likelihood.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace flowalign;
using flowalign::testing::random_params;
using flowalign::testing::tiny_config;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

DenseRowVector point(double a, double b) {
  DenseRowVector p(2);
  p << a, b;
  return p;
}

OdeSolveConfig rk4(Index steps) { return {steps, OdeMethod::rk4, OdeDirection::backward}; }

// Central-difference trace, one coordinate at a time.
double fd_trace(const VelocityField& f, const DenseRowVector& z, double t, double h = 1e-5) {
  double tr = 0.0;
  const DenseVector tv = DenseVector::Constant(1, t);
  for (Index k = 0; k < z.size(); ++k) {
    DenseMatrix zp = z, zm = z;
    zp(0, k) += h;
    zm(0, k) -= h;
    tr += (f.velocity(zp, tv)(0, k) - f.velocity(zm, tv)(0, k)) / (2 * h);
  }
  return tr;
}

// Gain of the optimal field for N(0, s^2 I): v = k(t) z.
double gain(double t, double s) { return (t * s * s - (1 - t)) / ((1 - t) * (1 - t) + t * t * s * s); }

// E over t ~ U[0,1], x0 ~ N(0, I) of the alignment residual for v = k(t) z, by midpoint rule:
// r = (k(1-t) + 1) x0 + (k t - 1) y.
double gaussian_align_loss(const DenseRowVector& y, double s) {
  const int n = 200000;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double t = (i + 0.5) / n;
    const double k = gain(t, s);
    const double a = k * (1 - t) + 1;
    const double b = k * t - 1;
    total += y.size() * a * a + b * b * y.squaredNorm();
  }
  return total / n;
}

}  // namespace

TEST(JacobianTrace, StubFieldsAreExact) {
  DenseRowVector c(2);
  c << 1.0, 0.0;
  for (TraceRoute route : {TraceRoute::forward, TraceRoute::backward}) {
    EXPECT_EQ(jacobian_trace(ConstantField(c), point(0.3, -2.0), 0.4, route), 0.0);
    EXPECT_EQ(jacobian_trace(LinearField::identity(2), point(0.3, -2.0), 0.4, route), 2.0);
  }
}

TEST(JacobianTrace, NetworkRoutesAgreeWithFiniteDifferences) {
  for (int trial = 0; trial < 10; ++trial) {
    const FlowNet net(random_params(tiny_config(), 900 + trial));
    Rng rng(1000 + trial);
    const DenseRowVector z = rng.normal_matrix(1, 2).row(0);
    const double t = rng.uniform();
    const double fwd = jacobian_trace(net, z, t, TraceRoute::forward);
    const double bwd = jacobian_trace(net, z, t, TraceRoute::backward);
    const double fd = fd_trace(net, z, t);
    EXPECT_NEAR(fwd, bwd, 1e-12 * (1 + std::abs(fwd)));
    EXPECT_LT(std::abs(fwd - fd) / std::max({std::abs(fwd), std::abs(fd), 1e-8}), 1e-5) << "trial " << trial;
  }
}

TEST(JacobianTrace, RejectsHighDimensions) {
  const ZeroField big(65);
  EXPECT_THROW(jacobian_trace(big, DenseMatrix::Zero(1, 65), DenseVector::Zero(1)), std::invalid_argument);
  EXPECT_NO_THROW(jacobian_trace(ZeroField(64), DenseMatrix::Zero(1, 64), DenseVector::Zero(1)));
}

TEST(ExactLogLikelihood, ConstantFieldTranslatesDensity) {
  DenseRowVector c(2);
  c << 1.0, 0.0;
  const double ll = exact_log_likelihood(ConstantField(c), point(1, 0), rk4(100));
  EXPECT_NEAR(ll, -1.8379, 1e-3);
  EXPECT_NEAR(ll, -kLog2Pi, 1e-12);
}

TEST(ExactLogLikelihood, IdentityFieldClosedForm) {
  const LinearField f = LinearField::identity(2);
  EXPECT_NEAR(exact_log_likelihood(f, point(0, 0), rk4(100)), -3.8379, 1e-3);
  EXPECT_NEAR(exact_log_likelihood(f, point(0, 0), rk4(100)), -kLog2Pi - 2.0, 1e-12);
  // x_t = x0 e^t, so x0 = y / e and the trace integral is d.
  const DenseRowVector y = point(1.5, -0.7);
  const double expected = -kLog2Pi - 0.5 * y.squaredNorm() * std::exp(-2.0) - 2.0;
  EXPECT_NEAR(exact_log_likelihood(f, y, rk4(100)), expected, 1e-9);
}

TEST(ExactLogLikelihood, GaussianOptimalFieldGivesTargetDensity) {
  const double s = 0.5;
  const DenseRowVector mean = point(1.0, -0.5);
  const GaussianOptimalField f(mean, s);
  Rng rng(1);
  const DenseMatrix y = rng.normal_matrix(20, 2) * 0.8;
  const DenseVector ll = exact_log_likelihood(f, y, rk4(200)).value;
  const DenseVector truth =
      standard_normal_log_density((y.rowwise() - mean) / s).array() - 2.0 * std::log(s);
  EXPECT_LT((ll - truth).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(ExactLogLikelihood, MixtureOptimalFieldGivesMixtureDensity) {
  const ToyDistributionSpec spec = ToyDistributionSpec::defaults(ToyKind::mog_circle);
  const MixtureOptimalField f(mixture_means(spec), spec.std);
  Rng rng(2);
  const DenseMatrix y = sample(spec, 50, rng);
  const LogLikelihoodWithError ll = exact_log_likelihood_with_error(f, y, rk4(200));
  const DenseVector truth = -nll_analytic(spec, y);
  EXPECT_LT((ll.value - truth).cwiseAbs().maxCoeff(), 1e-2);
  // The step-doubling estimate must cover the actual error.
  for (Index i = 0; i < y.rows(); ++i) {
    EXPECT_LE(std::abs(ll.value[i] - truth[i]), ll.quadrature_error[i] + 1e-6) << "row " << i;
  }
}

TEST(ExactLogLikelihood, BackwardThenForwardRoundTrip) {
  const ToyDistributionSpec spec = ToyDistributionSpec::defaults(ToyKind::mog_circle);
  const MixtureOptimalField f(mixture_means(spec), spec.std);
  Rng rng(3);
  const DenseMatrix y = sample(spec, 40, rng);
  const LogLikelihood ll = exact_log_likelihood(f, y, rk4(200));
  const DenseMatrix back = integrate(f, ll.base, {200, OdeMethod::rk4, OdeDirection::forward});
  EXPECT_LT((back - y).rowwise().norm().maxCoeff(), 1e-4);
}

TEST(ExactLogLikelihood, NonFiniteTrajectoryIsAnError) {
  DenseMatrix a(2, 2);
  a << 1e100, 0.0, 0.0, 1e100;
  EXPECT_THROW(exact_log_likelihood(LinearField(a, DenseRowVector::Zero(2)), point(1, 1), rk4(2)), NumericError);
}

TEST(EstimateC, StubFieldsHaveZeroVariance) {
  Rng rng(4);
  const McEstimate zero = estimate_C(ZeroField(2), point(0.4, 2.0), 100, rng);
  EXPECT_EQ(zero.mean, 0.0);
  EXPECT_EQ(zero.standard_error, 0.0);
  const McEstimate ident = estimate_C(LinearField::identity(2), point(0.4, 2.0), 100, rng);
  EXPECT_EQ(ident.mean, -2.0);
  EXPECT_EQ(ident.standard_error, 0.0);
}

TEST(EstimateC, GaussianFieldMatchesIntegratedGain) {
  // Tr = d k(s) for every z, and the integral of k over [0,1] is log s.
  const double s = 0.4;
  const GaussianOptimalField f(point(0.5, 0.5), s);
  Rng rng(5);
  const McEstimate c = estimate_C(f, point(-1, 1), 20000, rng);
  EXPECT_NEAR(c.mean, -2.0 * std::log(s), 3 * c.standard_error);
  EXPECT_GT(c.standard_error, 0.0);
}

TEST(EstimateC, TwoBudgetsAgreeOnANetwork) {
  const FlowNet net(random_params(tiny_config(), 6));
  Rng a(7), b(8);
  const McEstimate small = estimate_C(net, point(0.3, 0.9), 2000, a);
  const McEstimate large = estimate_C(net, point(0.3, 0.9), 20000, b);
  EXPECT_NEAR(small.mean, large.mean, 3 * std::hypot(small.standard_error, large.standard_error));
}

TEST(ElboReport, ConstantFieldAtItsOffset) {
  const DenseRowVector c = point(0.6, -0.2);
  Rng rng(9);
  const ElboReport r = elbo_report(ConstantField(c), c, 20000, rk4(100), rng);
  EXPECT_EQ(r.c_y.mean, 0.0);
  EXPECT_NEAR(r.align_loss.mean, 2.0, 3 * r.align_loss.standard_error);
  EXPECT_NEAR(r.exact_loglik, -kLog2Pi, 1e-12);
  EXPECT_NEAR(r.gap, 2.0 - kLog2Pi, 3 * r.align_loss.standard_error);
  EXPECT_NEAR(2.0 - kLog2Pi, 0.162, 1e-3);
  EXPECT_DOUBLE_EQ(r.elbo, r.c_y.mean - r.align_loss.mean);
  EXPECT_DOUBLE_EQ(r.gap, r.exact_loglik - r.elbo);
  EXPECT_TRUE(r.bound_holds());
}

TEST(ElboReport, ZeroFieldAtOrigin) {
  Rng rng(10);
  const ElboReport r = elbo_report(ZeroField(2), point(0, 0), 20000, rk4(100), rng);
  EXPECT_EQ(r.c_y.mean, 0.0);
  EXPECT_NEAR(r.elbo, -2.0, 3 * r.align_loss.standard_error);
  EXPECT_NEAR(r.exact_loglik, -1.8379, 1e-4);
  EXPECT_GT(r.gap, 0.0);
}

TEST(ElboReport, GaussianOptimalFieldComponentsMatchQuadrature) {
  // Every term has an independent closed form or 1-D quadrature for this field.
  const double s = 0.6;
  const GaussianOptimalField f(point(0, 0), s);
  const DenseMatrix y = (DenseMatrix(2, 2) << 0.0, 0.0, 0.9, -0.3).finished();
  Rng rng(11);
  const std::vector<ElboReport> reports = elbo_report(f, y, 40000, rk4(200), rng);
  for (Index i = 0; i < y.rows(); ++i) {
    const ElboReport& r = reports[static_cast<std::size_t>(i)];
    EXPECT_NEAR(r.c_y.mean, -2.0 * std::log(s), 3 * r.c_y.standard_error);
    EXPECT_NEAR(r.align_loss.mean, gaussian_align_loss(y.row(i), s), 3 * r.align_loss.standard_error);
    const double truth = -kLog2Pi - 2.0 * std::log(s) - 0.5 * y.row(i).squaredNorm() / (s * s);
    // Trapezoid error on the trace integral dominates; step doubling must cover it.
    EXPECT_NEAR(r.exact_loglik, truth, 1e-4);
    EXPECT_LE(std::abs(r.exact_loglik - truth), r.quadrature_error);
  }
}

TEST(ElboReport, StandardNormalOptimalFieldElboExceedsExactLikelihood) {
  // For N(0, I) the optimal field is v = k(t) z with C(0) = 0, so elbo(0) = -E|r|^2, which
  // integrates to -pi/2 while log N(0; 0, I) = -1.838. C - L_align is not a lower bound on
  // log p1 for this exact field.
  const double elbo = -gaussian_align_loss(point(0, 0), 1.0);
  EXPECT_NEAR(elbo, -std::numbers::pi / 2, 1e-9);
  EXPECT_GT(elbo, -kLog2Pi + 0.25);
  const GaussianOptimalField f(point(0, 0), 1.0);
  Rng rng(15);
  const ElboReport r = elbo_report(f, point(0, 0), 100000, rk4(200), rng);
  EXPECT_NEAR(r.elbo, elbo, 3 * std::hypot(r.c_y.standard_error, r.align_loss.standard_error));
  EXPECT_FALSE(r.bound_holds());
}

TEST(KnnLogDistance, TwoPointGeometry) {
  const DenseMatrix data = (DenseMatrix(2, 2) << 0, 0, 1, 0).finished();
  const DenseMatrix q = (DenseMatrix(1, 2) << 0.25, 0).finished();
  EXPECT_NEAR(knn_log_distance(data, q, 1)[0], std::log(0.25), 1e-15);
  EXPECT_NEAR(knn_log_distance(data, q, 1)[0], -1.3863, 1e-4);
  EXPECT_NEAR(knn_log_distance(data, q, 2)[0], std::log(0.75), 1e-15);
}

TEST(KnnLogDistance, DuplicateIsFloored) {
  const DenseMatrix data = (DenseMatrix(2, 2) << 0, 0, 1, 0).finished();
  EXPECT_EQ(knn_log_distance(data, data.topRows(1), 1)[0], std::log(kKnnDistanceFloor));
}

TEST(KnnLogDistance, MatchesSortedOracle) {
  Rng rng(12);
  const DenseMatrix data = rng.normal_matrix(300, 2);
  const DenseMatrix q = rng.normal_matrix(20, 2);
  const DenseVector got = knn_log_distance(data, q, 7);
  for (Index i = 0; i < q.rows(); ++i) {
    std::vector<double> d;
    for (Index j = 0; j < data.rows(); ++j) d.push_back((data.row(j) - q.row(i)).norm());
    std::sort(d.begin(), d.end());
    EXPECT_NEAR(got[i], std::log(d[6]), 1e-14);
  }
}

TEST(KnnLogDistance, Errors) {
  const DenseMatrix data = DenseMatrix::Zero(3, 2);
  EXPECT_THROW(knn_log_distance(data, DenseMatrix::Zero(1, 2), 4), std::invalid_argument);
  EXPECT_THROW(knn_log_distance(data, DenseMatrix::Zero(1, 2), 0), std::invalid_argument);
  EXPECT_THROW(knn_log_distance(data, DenseMatrix::Zero(1, 3), 1), std::invalid_argument);
}

TEST(Correlation, DefinitionalCases) {
  DenseVector a(5), b(5), c(5);
  a << 1, 2, 3, 4, 5;
  b << 3, 5, 7, 9, 11;
  c << 10, 1, 0.5, 0.1, -4;
  EXPECT_NEAR(*pearson(a, b), 1.0, 1e-15);
  EXPECT_NEAR(*spearman(a, c), -1.0, 1e-15);
  EXPECT_FALSE(pearson(a, DenseVector::Constant(5, 2.0)).has_value());
  EXPECT_FALSE(spearman(DenseVector::Constant(5, 2.0), a).has_value());
  EXPECT_THROW(pearson(a, DenseVector::Zero(4)), std::invalid_argument);
}

TEST(Correlation, AverageRanksForTies) {
  DenseVector v(5);
  v << 3, 1, 3, 2, 3;
  DenseVector expected(5);
  expected << 4, 1, 4, 2, 4;
  EXPECT_EQ(average_ranks(v), expected);
}

TEST(LipschitzProbe, LinearFieldGivesLargestSingularValue) {
  DenseMatrix a(2, 2);
  a << 2.0, 1.0, 0.0, 3.0;
  const LinearField f(a, DenseRowVector::Zero(2));
  Rng rng(13);
  const double expected = Eigen::JacobiSVD<Eigen::MatrixXd>(Eigen::MatrixXd(a)).singularValues()(0);
  EXPECT_NEAR(lipschitz_probe(f, rng.normal_matrix(5, 2), rng.uniform_vector(5)), expected, 1e-12);
}

TEST(ElboOrdering, CountsOnlyQualifyingPairs) {
  const DenseMatrix y = (DenseMatrix(3, 1) << 0.0, 1.0, 10.0).finished();
  DenseVector align(3), elbo(3), exact(3);
  align << 0.0, 5.0, 6.0;
  elbo << 0.0, -5.0, -6.0;
  exact << 1.0, -1.0, 2.0;
  // With L = 1 the bound is |dy| / 2: (0,1) and (0,2) qualify, (1,2) does not.
  // Only (0,1) is ordered the same way by both columns.
  const PairOrdering p = elbo_ordering_consistency(y, align, elbo, exact, 1.0);
  EXPECT_EQ(p.qualifying, 2);
  EXPECT_EQ(p.consistent, 1);
}

TEST(ElboOrdering, MixtureOptimalFieldIsMonotone) {
  const ToyDistributionSpec spec = ToyDistributionSpec::defaults(ToyKind::mog_circle);
  const MixtureOptimalField f(mixture_means(spec), spec.std);
  Rng rng(14);
  const DenseMatrix y = rng.uniform_matrix(30, 2, -3.0, 3.0);
  const std::vector<ElboReport> r = elbo_report(f, y, 4000, rk4(100), rng);
  DenseVector align(30), elbo(30), exact(30);
  for (Index i = 0; i < 30; ++i) {
    align[i] = r[static_cast<std::size_t>(i)].align_loss.mean;
    elbo[i] = r[static_cast<std::size_t>(i)].elbo;
    exact[i] = r[static_cast<std::size_t>(i)].exact_loglik;
  }
  const double lip = lipschitz_probe(f, rng.uniform_matrix(500, 2, -3.0, 3.0), rng.uniform_vector(500));
  const PairOrdering p = elbo_ordering_consistency(y, align, elbo, exact, lip);
  EXPECT_GE(p.fraction(), 0.99) << p.consistent << "/" << p.qualifying;
}
