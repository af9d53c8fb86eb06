#include "flowalign/align.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace flowalign {

namespace {

// Upper bound on network rows per forward pass; keeps activations of the toy network small.
constexpr Index kRowsPerChunk = 8192;

void require_positive(Index v, const char* name) {
  if (v < 1) throw std::invalid_argument(std::string("AlignConfig: ") + name + " must be >= 1");
}

}  // namespace

void AlignConfig::validate() const {
  require_positive(latents, "latents");
  require_positive(steps, "steps");
  require_positive(mc_samples, "mc_samples");
  require_positive(record_mc, "record_mc");
  if (!(lr > 0.0)) throw std::invalid_argument("AlignConfig: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("AlignConfig: Adam betas must lie in [0, 1)");
  }
  if (!(lambda > 0.0)) throw std::invalid_argument("AlignConfig: lambda must be positive");
  if (snapshot_every < 0 || record_every < 0) {
    throw std::invalid_argument("AlignConfig: cadences must be non-negative");
  }
}

AlignDraws AlignDraws::independent(Index m, Index dim, Index mc, Rng& rng) {
  if (mc < 1) throw std::invalid_argument("AlignDraws: mc must be >= 1");
  AlignDraws d;
  d.x0 = rng.normal_matrix(m * mc, dim);
  d.t = rng.uniform_vector(m * mc);
  d.mc = mc;
  return d;
}

AlignDraws AlignDraws::common(Index dim, Index mc, Rng& rng) {
  AlignDraws d = independent(1, dim, mc, rng);
  d.shared = true;
  return d;
}

AlignLossResult align_loss(const VelocityField& field, const DenseMatrix& y, const AlignDraws& draws,
                           bool with_grad) {
  const Index m = y.rows();
  const Index d = y.cols();
  const Index mc = draws.mc;
  if (d != field.dim()) {
    throw std::invalid_argument("align_loss: latents " + shape_string(y) + " do not match field dim " +
                                std::to_string(field.dim()));
  }
  if (mc < 1) throw std::invalid_argument("align_loss: mc must be >= 1");
  const Index expected_rows = draws.shared ? mc : m * mc;
  if (draws.x0.rows() != expected_rows || draws.t.size() != expected_rows || draws.x0.cols() != d) {
    throw std::invalid_argument("align_loss: draws " + shape_string(draws.x0) + " do not cover " +
                                std::to_string(m) + " latents at mc " + std::to_string(mc));
  }

  AlignLossResult out;
  out.loss = DenseVector::Zero(m);
  out.standard_error = DenseVector::Zero(m);
  if (with_grad) out.grad_y = DenseMatrix::Zero(m, d);

  const Index per_chunk = std::max<Index>(1, kRowsPerChunk / mc);
  for (Index first = 0; first < m; first += per_chunk) {
    const Index count = std::min(per_chunk, m - first);
    const Index rows = count * mc;
    DenseMatrix x0(rows, d);
    DenseVector t(rows);
    DenseMatrix target_y(rows, d);
    for (Index i = 0; i < count; ++i) {
      const Index src = draws.shared ? 0 : (first + i) * mc;
      x0.middleRows(i * mc, mc) = draws.x0.middleRows(src, mc);
      t.segment(i * mc, mc) = draws.t.segment(src, mc);
      target_y.middleRows(i * mc, mc) = y.row(first + i).replicate(mc, 1);
    }
    const DenseMatrix z = (1.0 - t.array()).matrix().asDiagonal() * x0 + t.asDiagonal() * target_y;
    const DenseMatrix displacement = target_y - x0;

    DenseMatrix residual;
    DenseMatrix grad_z;
    if (with_grad) {
      field.velocity_and_pullback(
          z, t,
          [&](const DenseMatrix& v) {
            residual = v - displacement;
            return DenseMatrix(2.0 * residual);
          },
          &grad_z);
    } else {
      residual = field.velocity(z, t) - displacement;
    }
    const DenseVector row_loss = residual.rowwise().squaredNorm();
    ensure_finite(row_loss, "align_loss");

    for (Index i = 0; i < count; ++i) {
      const auto block = row_loss.segment(i * mc, mc);
      const double mean = block.mean();
      out.loss[first + i] = mean;
      if (mc > 1) {
        const double var = (block.array() - mean).square().sum() / static_cast<double>(mc - 1);
        out.standard_error[first + i] = std::sqrt(var / static_cast<double>(mc));
      }
    }
    if (with_grad) {
      // dL/dy = t J^T (2r) - 2r, averaged over the draws of each latent.
      const DenseMatrix row_grad = t.asDiagonal() * grad_z - 2.0 * residual;
      for (Index i = 0; i < count; ++i) {
        out.grad_y.row(first + i) = row_grad.middleRows(i * mc, mc).colwise().sum() / static_cast<double>(mc);
      }
    }
  }
  return out;
}

AlignLossResult align_loss(const VelocityField& field, const DenseMatrix& y, Index mc, Rng& rng,
                           bool with_grad) {
  return align_loss(field, y, AlignDraws::independent(y.rows(), y.cols(), mc, rng), with_grad);
}

LatentBatch LatentBatch::fresh(DenseMatrix init) {
  LatentBatch b;
  b.y = std::move(init);
  const DenseMatrix* p = &b.y;
  b.optimizer = OptimizerState::zeros_like(std::span<const DenseMatrix* const>(&p, 1));
  return b;
}

DenseMatrix init_latents(Index m, Index dim, std::uint64_t seed) {
  Rng rng = Rng(seed).split(streams::kLatentInit);
  return rng.normal_matrix(m, dim);
}

AlignTrajectory optimize_latents(const VelocityField& field, DenseMatrix init, const AlignConfig& config,
                                 const AlignHooks& hooks) {
  config.validate();
  if (init.cols() != field.dim()) {
    throw std::invalid_argument("optimize_latents: init " + shape_string(init) +
                                " does not match field dim " + std::to_string(field.dim()));
  }
  ensure_finite(init, "optimize_latents init");

  const Rng root(config.seed);
  Rng record_rng = root.split(streams::kEvaluation);
  const AlignDraws record_draws = AlignDraws::independent(init.rows(), init.cols(), config.record_mc, record_rng);

  AlignTrajectory traj;
  LatentBatch batch = LatentBatch::fresh(std::move(init));

  auto due = [&](Index step, Index every) {
    return step == 0 || step == config.steps || (every > 0 && step % every == 0);
  };
  auto observe = [&](const LatentBatch& b) {
    if (due(b.step, config.snapshot_every)) {
      traj.snapshots.push_back(b);
      if (hooks.on_snapshot) hooks.on_snapshot(b);
    }
    if (config.record_every > 0 && due(b.step, config.record_every)) {
      AlignRecord r;
      r.step = b.step;
      r.align_loss = align_loss(field, b.y, record_draws, false).loss.mean();
      if (hooks.nll) r.nll_analytic = hooks.nll(b.y);
      if (hooks.knn) r.knn_logr = hooks.knn(b.y);
      traj.records.push_back(r);
      if (hooks.on_record) hooks.on_record(r);
    }
  };

  AdamConfig adam;
  adam.lr = config.lr;
  adam.beta1 = config.beta1;
  adam.beta2 = config.beta2;

  observe(batch);
  for (Index step = 0; step < config.steps; ++step) {
    Rng rng = root.split(streams::kAlignStep + static_cast<std::uint64_t>(step));
    AlignLossResult res;
    try {
      res = align_loss(field, batch.y, config.mc_samples, rng, true);
    } catch (const NumericError& e) {
      throw AlignDiverged("optimize_latents: step " + std::to_string(step) + ": " + e.what(), traj);
    }
    traj.step_losses.push_back(res.loss.mean());
    const DenseMatrix grad = config.lambda * res.grad_y;
    DenseMatrix* p = &batch.y;
    const DenseMatrix* g = &grad;
    adam_step(std::span<DenseMatrix* const>(&p, 1), std::span<const DenseMatrix* const>(&g, 1),
              batch.optimizer, adam);
    if (!batch.y.allFinite()) {
      throw AlignDiverged("optimize_latents: non-finite latents after step " + std::to_string(step), traj);
    }
    batch.step = step + 1;
    observe(batch);
  }
  return traj;
}

}  // namespace flowalign
