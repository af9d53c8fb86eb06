#include "flowalign/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace flowalign {

namespace {

constexpr double kPi = std::numbers::pi;

// Row-wise log-sum-exp of `args` (one row per query).
double log_sum_exp(const DenseRowVector& args) {
  const double m = args.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((args.array() - m).exp().sum());
}

double raw_nll_mixture(const DenseMatrix& means, double std, const DenseRowVector& x) {
  const double inv_two_var = 1.0 / (2.0 * std * std);
  const DenseRowVector args = -(means.rowwise() - x).rowwise().squaredNorm().transpose() * inv_two_var;
  const auto k = static_cast<double>(means.rows());
  const double d = static_cast<double>(x.size());
  return -log_sum_exp(args) + std::log(k) + 0.5 * d * std::log(2.0 * kPi * std * std);
}

void draw_raw(const ToyDistributionSpec& spec, Rng& rng, double& x, double& y) {
  switch (spec.kind) {
    case ToyKind::mog_circle: {
      const auto k = static_cast<std::uint64_t>(spec.components);
      const double angle = 2.0 * kPi * static_cast<double>(rng.below(k)) / spec.components;
      x = spec.radius * std::cos(angle) + spec.std * rng.normal();
      y = spec.radius * std::sin(angle) + spec.std * rng.normal();
      return;
    }
    case ToyKind::mog_grid: {
      const int n = spec.components;
      const auto idx = static_cast<int>(rng.below(static_cast<std::uint64_t>(n) * n));
      const double step = n > 1 ? 2.0 * spec.extent / (n - 1) : 0.0;
      const double start = n > 1 ? -spec.extent : 0.0;
      x = start + step * (idx % n) + spec.std * rng.normal();
      y = start + step * (idx / n) + spec.std * rng.normal();
      return;
    }
    case ToyKind::two_moons: {
      const bool upper = rng.below(2) == 0;
      const double theta = kPi * rng.uniform();
      const double cx = upper ? std::cos(theta) : 1.0 - std::cos(theta);
      const double cy = upper ? std::sin(theta) : 0.5 - std::sin(theta);
      x = spec.radius * (cx - 0.5) + spec.noise * rng.normal();
      y = spec.radius * (cy - 0.25) + spec.noise * rng.normal();
      return;
    }
    case ToyKind::concentric_rings: {
      const auto ring = static_cast<double>(rng.below(static_cast<std::uint64_t>(spec.components)) + 1);
      const double r = spec.radius * ring / spec.components;
      const double theta = 2.0 * kPi * rng.uniform();
      x = r * std::cos(theta) + spec.noise * rng.normal();
      y = r * std::sin(theta) + spec.noise * rng.normal();
      return;
    }
    case ToyKind::spiral: {
      const double s = std::sqrt(rng.uniform());
      const double theta = 2.0 * kPi * spec.turns * s;
      x = spec.radius * s * std::cos(theta) + spec.noise * rng.normal();
      y = spec.radius * s * std::sin(theta) + spec.noise * rng.normal();
      return;
    }
    case ToyKind::swiss_roll_2d: {
      const double t = 1.5 * kPi * (1.0 + 2.0 * rng.uniform());
      const double scale = spec.radius / (4.5 * kPi);
      x = scale * t * std::cos(t) + spec.noise * rng.normal();
      y = scale * t * std::sin(t) + spec.noise * rng.normal();
      return;
    }
  }
  throw std::invalid_argument("sample: unknown distribution kind");
}

}  // namespace

std::string_view to_string(ToyKind kind) {
  switch (kind) {
    case ToyKind::mog_circle: return "mog_circle";
    case ToyKind::mog_grid: return "mog_grid";
    case ToyKind::two_moons: return "two_moons";
    case ToyKind::concentric_rings: return "concentric_rings";
    case ToyKind::spiral: return "spiral";
    case ToyKind::swiss_roll_2d: return "swiss_roll_2d";
  }
  return "unknown";
}

ToyKind parse_toy_kind(std::string_view name) {
  for (ToyKind k : {ToyKind::mog_circle, ToyKind::mog_grid, ToyKind::two_moons,
                    ToyKind::concentric_rings, ToyKind::spiral, ToyKind::swiss_roll_2d}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown distribution kind '" + std::string(name) + "'");
}

ToyDistributionSpec ToyDistributionSpec::defaults(ToyKind kind) {
  ToyDistributionSpec s;
  s.kind = kind;
  switch (kind) {
    case ToyKind::mog_circle:
      break;
    case ToyKind::mog_grid:
      s.components = 5;
      s.extent = 4.0;
      s.std = 0.3;
      break;
    case ToyKind::two_moons:
      s.radius = 1.0;
      s.noise = 0.1;
      break;
    case ToyKind::concentric_rings:
      s.components = 3;
      s.radius = 3.0;
      s.noise = 0.1;
      break;
    case ToyKind::spiral:
      s.radius = 3.0;
      s.turns = 1.5;
      s.noise = 0.1;
      break;
    case ToyKind::swiss_roll_2d:
      s.radius = 3.0;
      s.noise = 0.1;
      break;
  }
  return s;
}

void ToyDistributionSpec::validate() const {
  if (components < 1) throw std::invalid_argument("distribution: components must be >= 1");
  if (!(std > 0.0)) throw std::invalid_argument("distribution: std must be > 0");
  if (!(noise > 0.0)) throw std::invalid_argument("distribution: noise must be > 0");
  if (!(extent > 0.0)) throw std::invalid_argument("distribution: extent must be > 0");
  if (!(turns > 0.0)) throw std::invalid_argument("distribution: turns must be > 0");
  if (!(radius >= 0.0) || !std::isfinite(radius)) {
    throw std::invalid_argument("distribution: radius must be finite and >= 0");
  }
  if (kind != ToyKind::mog_circle && !(radius > 0.0)) {
    throw std::invalid_argument("distribution: radius must be > 0 for " +
                                std::string(to_string(kind)));
  }
  if (normalization && !(*normalization > 0.0)) {
    throw std::invalid_argument("distribution: normalization must be > 0");
  }
}

DenseMatrix mixture_means(const ToyDistributionSpec& spec) {
  if (spec.kind == ToyKind::mog_circle) {
    DenseMatrix means(spec.components, kToyDim);
    for (int k = 0; k < spec.components; ++k) {
      const double angle = 2.0 * kPi * k / spec.components;
      means(k, 0) = spec.radius * std::cos(angle);
      means(k, 1) = spec.radius * std::sin(angle);
    }
    return means;
  }
  if (spec.kind == ToyKind::mog_grid) {
    const int n = spec.components;
    const double step = n > 1 ? 2.0 * spec.extent / (n - 1) : 0.0;
    const double start = n > 1 ? -spec.extent : 0.0;
    DenseMatrix means(static_cast<Index>(n) * n, kToyDim);
    for (int idx = 0; idx < n * n; ++idx) {
      means(idx, 0) = start + step * (idx % n);
      means(idx, 1) = start + step * (idx / n);
    }
    return means;
  }
  throw std::invalid_argument("mixture_means: " + std::string(to_string(spec.kind)) +
                              " is not a Gaussian mixture");
}

DenseMatrix sample(const ToyDistributionSpec& spec, Index n, Rng& rng) {
  spec.validate();
  if (n < 0) throw std::invalid_argument("sample: negative sample count");
  DenseMatrix out(n, kToyDim);
  for (Index i = 0; i < n; ++i) draw_raw(spec, rng, out(i, 0), out(i, 1));
  if (spec.normalization) out /= *spec.normalization;
  return out;
}

double estimate_normalization_std(const ToyDistributionSpec& spec, Index n, Rng& rng) {
  if (n < 2) throw std::invalid_argument("estimate_normalization_std: need at least 2 samples");
  ToyDistributionSpec raw = spec;
  raw.normalization.reset();
  raw.validate();
  // Welford per coordinate.
  double mean[2] = {0.0, 0.0};
  double m2[2] = {0.0, 0.0};
  double p[2];
  for (Index i = 0; i < n; ++i) {
    draw_raw(raw, rng, p[0], p[1]);
    const double count = static_cast<double>(i + 1);
    for (int c = 0; c < 2; ++c) {
      const double delta = p[c] - mean[c];
      mean[c] += delta / count;
      m2[c] += delta * (p[c] - mean[c]);
    }
  }
  const double denom = static_cast<double>(n);
  return std::sqrt(0.5 * (m2[0] / denom + m2[1] / denom));
}

DenseVector nll_analytic(const ToyDistributionSpec& spec, const DenseMatrix& points) {
  if (!spec.is_mixture()) {
    throw std::invalid_argument("nll_analytic: " + std::string(to_string(spec.kind)) +
                                " has no closed-form density; use kde_log_density");
  }
  if (points.cols() != kToyDim) {
    throw std::invalid_argument("nll_analytic: expected 2 columns, got " +
                                std::to_string(points.cols()));
  }
  const DenseMatrix means = mixture_means(spec);
  const double s = spec.normalization.value_or(1.0);
  const double log_jacobian = static_cast<double>(kToyDim) * std::log(s);
  DenseVector out(points.rows());
  for (Index i = 0; i < points.rows(); ++i) {
    const DenseRowVector x = points.row(i) * s;
    out[i] = raw_nll_mixture(means, spec.std, x) - log_jacobian;
  }
  return out;
}

KdeEstimator::KdeEstimator(DenseMatrix support, double bandwidth)
    : support_(std::move(support)), bandwidth_(bandwidth) {
  if (support_.rows() < 1) throw std::invalid_argument("KdeEstimator: need at least one sample");
  if (!(bandwidth_ > 0.0)) throw std::invalid_argument("KdeEstimator: bandwidth must be > 0");
  ensure_finite(support_, "KdeEstimator");
}

DenseVector KdeEstimator::log_density(const DenseMatrix& points) const {
  if (points.cols() != dim()) {
    throw std::invalid_argument("kde_log_density: query dimension " +
                                std::to_string(points.cols()) + " != " + std::to_string(dim()));
  }
  const double d = static_cast<double>(dim());
  const double h = bandwidth_;
  const double log_norm = -std::log(static_cast<double>(size())) - d * std::log(h) -
                          0.5 * d * std::log(2.0 * kPi);
  const double inv_two_h2 = 1.0 / (2.0 * h * h);
  DenseVector out(points.rows());
  DenseRowVector args(size());
  for (Index q = 0; q < points.rows(); ++q) {
    args = -(support_.rowwise() - points.row(q)).rowwise().squaredNorm().transpose() * inv_two_h2;
    out[q] = log_sum_exp(args) + log_norm;
  }
  return out;
}

ReferenceDensity::ReferenceDensity(const ToyDistributionSpec& spec, Rng& rng, Index kde_samples,
                                   double kde_bandwidth)
    : spec_(spec) {
  spec_.validate();
  if (!spec_.is_mixture()) kde_.emplace(sample(spec_, kde_samples, rng), kde_bandwidth);
}

DenseVector ReferenceDensity::nll(const DenseMatrix& points) const {
  if (kde_) return -kde_->log_density(points);
  return nll_analytic(spec_, points);
}

}  // namespace flowalign
