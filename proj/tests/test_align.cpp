#include "flowalign/align.hpp"
#include "flowalign/distributions.hpp"
#include "flowalign/likelihood.hpp"
#include "flowalign/flownet.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>

using namespace flowalign;
using flowalign::testing::random_params;
using flowalign::testing::tiny_config;

namespace {

DenseRowVector point(double a, double b) {
  DenseRowVector p(2);
  p << a, b;
  return p;
}

// Returns NaN once any coordinate leaves [-limit, limit].
class BlowUpField final : public VelocityField {
 public:
  explicit BlowUpField(double limit) : limit_(limit) {}
  Index dim() const override { return 2; }
  DenseMatrix velocity(const DenseMatrix& z, const DenseVector& t) const override {
    check_batch(z, t, "BlowUpField");
    DenseMatrix v = -1e3 * z;
    for (Index i = 0; i < z.rows(); ++i)
      if (z.row(i).cwiseAbs().maxCoeff() > limit_) v.row(i).setConstant(std::nan(""));
    return v;
  }
  DenseMatrix input_gradient(const DenseMatrix& z, const DenseVector& t, const DenseMatrix& u) const override {
    return velocity(z, t).array().isNaN().select(velocity(z, t), -1e3 * u);
  }
  DenseMatrix tangent(const DenseMatrix& z, const DenseVector& t, const DenseMatrix& dz) const override {
    return input_gradient(z, t, dz);
  }

 private:
  double limit_;
};

AlignConfig short_config(Index steps) {
  AlignConfig c;
  c.steps = steps;
  c.snapshot_every = 10;
  c.record_every = 5;
  c.record_mc = 4;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(AlignLoss, ZeroFieldMatchesClosedForm) {
  const ZeroField field(2);
  for (const DenseRowVector& y : {point(0, 0), point(1, 2)}) {
    Rng rng(1);
    const AlignLossResult r = align_loss(field, y, 10000, rng, false);
    const double expected = y.squaredNorm() + 2.0;
    EXPECT_NEAR(r.loss[0], expected, 3 * r.standard_error[0]);
    EXPECT_GT(r.standard_error[0], 0.0);
  }
}

TEST(AlignLoss, PointTargetVanishesAtItsTarget) {
  const DenseRowVector a = point(0.75, -1.5);
  const PointTargetField field(a);
  Rng rng(2);
  AlignDraws draws = AlignDraws::independent(1, 2, 500, rng);
  draws.t *= 0.99;  // the stub is only consistent up to its time cap
  const AlignLossResult r = align_loss(field, a, draws, true);
  EXPECT_LT(r.loss[0], 1e-26);
  EXPECT_LT(r.grad_y.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(AlignLoss, GradientMatchesFiniteDifferencesOnFixedDraws) {
  for (int trial = 0; trial < 10; ++trial) {
    const FlowNet net(random_params(tiny_config(), 700 + trial));
    Rng rng(800 + trial);
    const DenseMatrix y0 = rng.normal_matrix(3, 2) * 1.5;
    const AlignDraws draws = AlignDraws::independent(3, 2, 4, rng);
    const DifferentiableFunction f = [&](const DenseMatrix& y, DenseMatrix* grad) {
      const AlignLossResult r = align_loss(net, y, draws, grad != nullptr);
      if (grad != nullptr) *grad = r.grad_y;
      return r.loss.sum();
    };
    EXPECT_LT(check_gradient(f, y0, 1e-5), 1e-5) << "trial " << trial;
  }
}

TEST(AlignLoss, SharedDrawsEqualReplicatedIndependentDraws) {
  const FlowNet net(random_params(tiny_config(), 9));
  Rng rng(10);
  const AlignDraws shared = AlignDraws::common(2, 6, rng);
  AlignDraws replicated;
  replicated.mc = 6;
  replicated.x0 = shared.x0.replicate(4, 1);
  replicated.t = shared.t.replicate(4, 1);
  const DenseMatrix y = rng.normal_matrix(4, 2);
  const AlignLossResult a = align_loss(net, y, shared);
  const AlignLossResult b = align_loss(net, y, replicated);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad_y, b.grad_y);
}

TEST(AlignLoss, ResultDoesNotDependOnChunking) {
  // 3000 latents at mc 4 spans two chunks; every latent must match its lone evaluation.
  const FlowNet net(random_params(tiny_config(), 11));
  Rng rng(12);
  const DenseMatrix y = rng.normal_matrix(3000, 2);
  const AlignDraws draws = AlignDraws::independent(3000, 2, 4, rng);
  const AlignLossResult all = align_loss(net, y, draws);
  for (Index i : {Index{0}, Index{2047}, Index{2048}, Index{2999}}) {
    AlignDraws one;
    one.mc = 4;
    one.x0 = draws.x0.middleRows(i * 4, 4);
    one.t = draws.t.segment(i * 4, 4);
    const AlignLossResult r = align_loss(net, y.row(i), one);
    EXPECT_NEAR(r.loss[0], all.loss[i], 1e-13);
    EXPECT_LT((r.grad_y.row(0) - all.grad_y.row(i)).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TEST(AlignLoss, VarianceScalesInverselyWithMc) {
  const FlowNet net(random_params(tiny_config(), 13));
  const DenseMatrix y = point(0.5, -0.3).replicate(4000, 1);
  auto variance_at = [&](Index mc, std::uint64_t seed) {
    Rng rng(seed);
    const DenseVector est = align_loss(net, y, mc, rng, false).loss;
    return (est.array() - est.mean()).square().sum() / static_cast<double>(est.size() - 1);
  };
  const double ratio = variance_at(16, 14) / variance_at(32, 15);
  EXPECT_GE(ratio, 1.5);
  EXPECT_LE(ratio, 3.0);
}

TEST(AlignLoss, RejectsMismatchedShapes) {
  const ZeroField field(2);
  Rng rng(16);
  EXPECT_THROW(align_loss(field, DenseMatrix::Zero(2, 3), 4, rng), std::invalid_argument);
  const AlignDraws draws = AlignDraws::independent(3, 2, 4, rng);
  EXPECT_THROW(align_loss(field, DenseMatrix::Zero(2, 2), draws), std::invalid_argument);
  EXPECT_THROW(align_loss(field, DenseMatrix::Zero(2, 2), 0, rng), std::invalid_argument);
}

TEST(OptimizeLatents, PointTargetGradientVanishesOnEveryStepDraw) {
  // The target is a stationary point: the gradient seen by every optimizer step is zero up to
  // rounding. Adam itself is scale-free below its eps, so the check is on the gradient rather
  // than on the iterate, which would move by lr-sized steps driven purely by rounding.
  const DenseRowVector a = point(-0.4, 1.1);
  const PointTargetField field(a, 1.0 - 1e-9);
  const DenseMatrix y = a.replicate(20, 1);
  const AlignConfig c = short_config(200);
  double worst = 0.0;
  for (Index step = 0; step < c.steps; ++step) {
    Rng rng = Rng(c.seed).split(streams::kAlignStep + static_cast<std::uint64_t>(step));
    worst = std::max(worst, align_loss(field, y, c.mc_samples, rng).grad_y.cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(OptimizeLatents, ExactlyZeroGradientLeavesLatentsUnchanged) {
  // At y = a with a = 0 and every draw at t = 0 the residual is exactly zero in floating point.
  const PointTargetField field(DenseRowVector::Zero(2));
  Rng rng(25);
  AlignDraws draws = AlignDraws::independent(5, 2, 3, rng);
  draws.t.setZero();
  const AlignLossResult r = align_loss(field, DenseMatrix::Zero(5, 2), draws);
  EXPECT_EQ(r.grad_y.cwiseAbs().maxCoeff(), 0.0);
  LatentBatch batch = LatentBatch::fresh(DenseMatrix::Zero(5, 2));
  DenseMatrix* p = &batch.y;
  const DenseMatrix* g = &r.grad_y;
  AdamConfig adam;
  adam.lr = 1e-2;
  for (int i = 0; i < 10; ++i) {
    adam_step(std::span<DenseMatrix* const>(&p, 1), std::span<const DenseMatrix* const>(&g, 1), batch.optimizer, adam);
  }
  EXPECT_EQ(batch.y, DenseMatrix::Zero(5, 2));
}

TEST(OptimizeLatents, LeavesNetworkParametersUntouched) {
  const auto params = std::make_shared<const VelocityFieldParams>(random_params(tiny_config(), 17));
  const VelocityFieldParams before = *params;
  const FlowNet net(params);
  optimize_latents(net, init_latents(16, 2, 18), short_config(12));
  const auto a = before.tensors();
  const auto b = params->tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(std::memcmp(a[i]->data(), b[i]->data(), sizeof(double) * a[i]->size()), 0);
  }
}

TEST(OptimizeLatents, SnapshotAndRecordCadence) {
  std::vector<Index> snap_steps, record_steps;
  AlignHooks hooks;
  hooks.on_snapshot = [&](const LatentBatch& b) { snap_steps.push_back(b.step); };
  hooks.on_record = [&](const AlignRecord& r) { record_steps.push_back(r.step); };
  hooks.nll = [](const DenseMatrix& y) { return y.squaredNorm(); };
  const AlignTrajectory traj = optimize_latents(ZeroField(2), init_latents(8, 2, 19), short_config(23), hooks);
  EXPECT_EQ(snap_steps, (std::vector<Index>{0, 10, 20, 23}));
  EXPECT_EQ(record_steps, (std::vector<Index>{0, 5, 10, 15, 20, 23}));
  EXPECT_EQ(traj.snapshots.size(), 4u);
  EXPECT_EQ(traj.step_losses.size(), 23u);
  EXPECT_TRUE(std::isfinite(traj.records.back().nll_analytic));
  EXPECT_TRUE(std::isnan(traj.records.back().knn_logr));
}

TEST(OptimizeLatents, ElevenSnapshotsForFiveThousandSteps) {
  AlignConfig c;
  c.steps = 5000;
  c.record_every = 0;
  const AlignTrajectory traj = optimize_latents(ZeroField(2), init_latents(2, 2, 20), c);
  EXPECT_EQ(traj.snapshots.size(), 11u);
  EXPECT_EQ(traj.snapshots.front().step, 0);
  EXPECT_EQ(traj.snapshots.back().step, 5000);
}

TEST(OptimizeLatents, ZeroFieldPullsLatentsToOrigin) {
  // Under v = 0 the loss is |y|^2 + d, minimized at the origin.
  AlignConfig c = short_config(2000);
  c.mc_samples = 8;
  const DenseMatrix init = init_latents(50, 2, 21) * 2.0;
  const AlignTrajectory traj = optimize_latents(ZeroField(2), init, c);
  EXPECT_LT(traj.final().y.rowwise().norm().mean(), 0.1);
  EXPECT_LT(traj.records.back().align_loss, traj.records.front().align_loss);
}

TEST(OptimizeLatents, DeterministicUnderSeed) {
  const FlowNet net(random_params(tiny_config(), 22));
  const AlignTrajectory a = optimize_latents(net, init_latents(10, 2, 23), short_config(15));
  const AlignTrajectory b = optimize_latents(net, init_latents(10, 2, 23), short_config(15));
  EXPECT_EQ(a.final().y, b.final().y);
  AlignConfig other = short_config(15);
  other.seed = 4;
  EXPECT_NE(optimize_latents(net, init_latents(10, 2, 23), other).final().y, a.final().y);
}

TEST(OptimizeLatents, DivergenceKeepsTrajectorySoFar) {
  AlignConfig c = short_config(50);
  c.lr = 5.0;
  try {
    optimize_latents(BlowUpField(3.0), init_latents(4, 2, 24), c);
    FAIL() << "expected divergence";
  } catch (const AlignDiverged& e) {
    ASSERT_FALSE(e.so_far().snapshots.empty());
    EXPECT_EQ(e.so_far().snapshots.front().step, 0);
  }
}

// Even the exact minimizer of the flow-matching loss leaves a large irreducible alignment
// loss on the data: y - x0 is not a function of z_t, so its conditional variance stays.
TEST(OptimalMixtureField, DataAlignLossIsFarFromZero) {
  const ToyDistributionSpec spec = ToyDistributionSpec::defaults(ToyKind::mog_circle);
  const MixtureOptimalField f(mixture_means(spec), spec.std);
  Rng rng(31);
  const DenseMatrix data = sample(spec, 500, rng);
  const DenseMatrix uniform = rng.uniform_matrix(500, 2, -3.0, 3.0);
  const double ld = align_loss(f, data, 256, rng, false).loss.mean();
  const double lu = align_loss(f, uniform, 256, rng, false).loss.mean();
  EXPECT_LT(ld, lu);
  EXPECT_GT(ld / lu, 0.5);
}

// With the exact field, loss and NLL fall together while latents travel, then both sit on a
// plateau where only optimizer jitter moves them and ranks carry no shared trend.
TEST(OptimalMixtureField, CoDeclineHoldsDuringDescentOnly) {
  const ToyDistributionSpec spec = ToyDistributionSpec::defaults(ToyKind::mog_circle);
  const MixtureOptimalField f(mixture_means(spec), spec.std);
  AlignConfig c;
  c.latents = 300;
  AlignHooks hooks;
  hooks.nll = [&](const DenseMatrix& y) { return nll_analytic(spec, y).mean(); };
  const AlignTrajectory traj = optimize_latents(f, init_latents(c.latents, 2, 32), c, hooks);
  const Index n = static_cast<Index>(traj.records.size());
  DenseVector loss(n), nll(n);
  for (Index i = 0; i < n; ++i) {
    loss[i] = traj.records[static_cast<std::size_t>(i)].align_loss;
    nll[i] = traj.records[static_cast<std::size_t>(i)].nll_analytic;
  }
  EXPECT_GT(*spearman(loss.head(100), nll.head(100)), 0.99);
  EXPECT_LT(*spearman(loss, nll), 0.9);
}

TEST(AlignConfig, Validation) {
  AlignConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.latents, 1000);
  EXPECT_EQ(c.steps, 5000);
  EXPECT_DOUBLE_EQ(c.lr, 1e-2);
  c.mc_samples = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AlignConfig{};
  c.lambda = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
