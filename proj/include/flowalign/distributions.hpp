#ifndef FLOWALIGN_DISTRIBUTIONS_HPP
#define FLOWALIGN_DISTRIBUTIONS_HPP

#include "flowalign/numerics.hpp"
#include "flowalign/rng.hpp"

#include <optional>
#include <string>
#include <string_view>

namespace flowalign {

enum class ToyKind { mog_circle, mog_grid, two_moons, concentric_rings, spiral, swiss_roll_2d };

std::string_view to_string(ToyKind kind);
ToyKind parse_toy_kind(std::string_view name);

/// Parametric 2D target distribution. Field meaning depends on `kind`:
///
///   mog_circle        `components` isotropic Gaussians with std `std`, means on a circle of
///                     `radius` (first mean at angle 0)
///   mog_grid          `components` x `components` Gaussians with std `std` on [-extent, extent]^2
///   two_moons         interleaved half circles of unit radius, centred at the origin, scaled
///                     by `radius`, plus Gaussian noise `noise`
///   concentric_rings  `components` rings with radii radius*k/components, noise `noise`
///   spiral            one arm of `turns` revolutions growing to `radius`, noise `noise`
///   swiss_roll_2d     swiss roll curve t*(cos t, sin t), t in [1.5pi, 4.5pi], rescaled so the
///                     outermost point sits at `radius`, noise `noise`
///
/// Samples are divided by `normalization` when set; densities account for it through the
/// change of variables log p_norm(y) = log p_raw(s*y) + d*log s.
struct ToyDistributionSpec {
  ToyKind kind = ToyKind::mog_circle;
  int components = 5;
  double radius = 3.0;
  double std = 0.3;
  double extent = 4.0;
  double noise = 0.1;
  double turns = 1.5;
  std::optional<double> normalization;

  /// Defaults for each kind; mog_circle matches the 5-component, radius-3, std-0.3 toy.
  static ToyDistributionSpec defaults(ToyKind kind);

  bool is_mixture() const { return kind == ToyKind::mog_circle || kind == ToyKind::mog_grid; }
  void validate() const;
};

constexpr Index kToyDim = 2;

/// Component means (raw, unnormalized coordinates) of a mixture kind, one per row.
DenseMatrix mixture_means(const ToyDistributionSpec& spec);

/// n i.i.d. draws, normalized when the spec carries a normalization.
DenseMatrix sample(const ToyDistributionSpec& spec, Index n, Rng& rng);

/// Pooled standard deviation sqrt((var_x + var_y) / 2) of n raw samples.
double estimate_normalization_std(const ToyDistributionSpec& spec, Index n, Rng& rng);

/// Exact -log p(x) for mixture kinds, evaluated with log-sum-exp over components.
DenseVector nll_analytic(const ToyDistributionSpec& spec, const DenseMatrix& points);

/// Gaussian-kernel density estimate with fixed bandwidth.
class KdeEstimator {
 public:
  KdeEstimator(DenseMatrix support, double bandwidth);

  Index size() const { return support_.rows(); }
  Index dim() const { return support_.cols(); }
  double bandwidth() const { return bandwidth_; }
  const DenseMatrix& support() const { return support_; }

  /// log p_hat(x) = log[(1 / (N h^d)) sum_i K((x - x_i) / h)], K the standard normal kernel.
  DenseVector log_density(const DenseMatrix& points) const;

 private:
  DenseMatrix support_;
  double bandwidth_;
};

inline DenseVector kde_log_density(const KdeEstimator& est, const DenseMatrix& points) {
  return est.log_density(points);
}

constexpr Index kKdeDefaultSamples = 100000;
constexpr double kKdeDefaultBandwidth = 0.1;

/// Ground-truth negative log-likelihood of a toy target: analytic for mixtures, KDE otherwise.
class ReferenceDensity {
 public:
  ReferenceDensity(const ToyDistributionSpec& spec, Rng& rng,
                   Index kde_samples = kKdeDefaultSamples,
                   double kde_bandwidth = kKdeDefaultBandwidth);

  DenseVector nll(const DenseMatrix& points) const;
  bool analytic() const { return !kde_.has_value(); }

 private:
  ToyDistributionSpec spec_;
  std::optional<KdeEstimator> kde_;
};

}  // namespace flowalign

#endif  // FLOWALIGN_DISTRIBUTIONS_HPP
