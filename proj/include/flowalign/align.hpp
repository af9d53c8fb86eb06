#ifndef FLOWALIGN_ALIGN_HPP
#define FLOWALIGN_ALIGN_HPP

#include "flowalign/rng.hpp"
#include "flowalign/training.hpp"
#include "flowalign/velocity_field.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

namespace flowalign {

struct AlignConfig {
  Index latents = 1000;
  double lr = 1e-2;
  Index steps = 5000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  /// (t, x0) draws per latent per optimizer step.
  Index mc_samples = 1;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  /// Cadence of latent snapshots; 0 keeps only the first and last.
  Index snapshot_every = 500;
  /// Cadence of metric records; 0 disables them.
  Index record_every = 10;
  /// Draws per latent for the align_loss column of each record. The draws are fixed for the
  /// whole run, so the series is a deterministic function of the latents.
  Index record_mc = 16;

  void validate() const;
};

/// Draws used by one align_loss evaluation. Row i of `t` and `x0` belongs to latent
/// i / mc (latent-major). When `shared` is set there are only mc rows and every latent
/// reuses them (common random numbers).
struct AlignDraws {
  DenseVector t;
  DenseMatrix x0;
  Index mc = 0;
  bool shared = false;

  /// Independent draws for each of m latents.
  static AlignDraws independent(Index m, Index dim, Index mc, Rng& rng);
  /// One set of mc draws shared by every latent.
  static AlignDraws common(Index dim, Index mc, Rng& rng);
};

struct AlignLossResult {
  /// Per-latent mean over the draws.
  DenseVector loss;
  /// Per-latent standard error of that mean (0 when mc == 1).
  DenseVector standard_error;
  /// d loss_i / d y_i; empty unless requested.
  DenseMatrix grad_y;
};

/// Monte Carlo alignment loss |v((1-t) x0 + t y, t) - (y - x0)|^2 for every latent row of y,
/// with the field held fixed. The gradient flows through the network input and the target.
AlignLossResult align_loss(const VelocityField& field, const DenseMatrix& y, const AlignDraws& draws,
                           bool with_grad = true);

/// Convenience overload drawing mc independent samples per latent from rng.
AlignLossResult align_loss(const VelocityField& field, const DenseMatrix& y, Index mc, Rng& rng,
                           bool with_grad = true);

struct LatentBatch {
  DenseMatrix y;
  OptimizerState optimizer;
  Index step = 0;

  static LatentBatch fresh(DenseMatrix init);
};

struct AlignRecord {
  Index step = 0;
  double align_loss = 0.0;
  double nll_analytic = std::numeric_limits<double>::quiet_NaN();
  double knn_logr = std::numeric_limits<double>::quiet_NaN();
};

/// Optional metric callbacks; each maps the current latents to a batch mean.
struct AlignHooks {
  std::function<double(const DenseMatrix& y)> nll;
  std::function<double(const DenseMatrix& y)> knn;
  std::function<void(const AlignRecord&)> on_record;
  std::function<void(const LatentBatch&)> on_snapshot;
};

struct AlignTrajectory {
  std::vector<LatentBatch> snapshots;
  std::vector<AlignRecord> records;
  /// Mean minibatch loss seen by each optimizer step.
  std::vector<double> step_losses;

  const LatentBatch& final() const { return snapshots.back(); }
};

class AlignDiverged : public NumericError {
 public:
  AlignDiverged(const std::string& what, AlignTrajectory so_far)
      : NumericError(what), so_far_(std::move(so_far)) {}
  const AlignTrajectory& so_far() const { return so_far_; }

 private:
  AlignTrajectory so_far_;
};

/// Standard-normal latents drawn from the latent-init stream of `seed`.
DenseMatrix init_latents(Index m, Index dim, std::uint64_t seed);

/// Adam on the latents against the frozen field. Step k resamples its (t, x0) draws from
/// stream kAlignStep + k. Snapshots are taken at step 0, every snapshot_every steps and at
/// the end; records at step 0, every record_every steps and at the end.
AlignTrajectory optimize_latents(const VelocityField& field, DenseMatrix init, const AlignConfig& config,
                                 const AlignHooks& hooks = {});

}  // namespace flowalign

#endif  // FLOWALIGN_ALIGN_HPP
