#ifndef FLOWALIGN_TRAINING_HPP
#define FLOWALIGN_TRAINING_HPP

#include "flowalign/flownet.hpp"
#include "flowalign/ode.hpp"
#include "flowalign/rng.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace flowalign {

// Stream ids used to split the global seed; each consumer draws from its own stream so runs
// never depend on the order in which other consumers drew.
namespace streams {
constexpr std::uint64_t kInit = 1;
constexpr std::uint64_t kNormalization = 2;
constexpr std::uint64_t kSampling = 3;
constexpr std::uint64_t kLatentInit = 4;
constexpr std::uint64_t kReference = 5;
constexpr std::uint64_t kEvaluation = 6;
constexpr std::uint64_t kTraceProbe = 7;
constexpr std::uint64_t kTrainStep = std::uint64_t{1} << 40;  // + step
constexpr std::uint64_t kAlignStep = std::uint64_t{2} << 40;  // + step
}  // namespace streams

// ---------------------------------------------------------------------------
// Adam / AdamW

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double max_grad_norm = 0.0;
};

struct OptimizerState {
  std::vector<DenseMatrix> first_moment;
  std::vector<DenseMatrix> second_moment;
  std::int64_t step = 0;

  /// Zero moments mirroring the given shapes.
  static OptimizerState zeros_like(std::span<const DenseMatrix* const> params);
};

/// One bias-corrected Adam step with decoupled weight decay, after clipping the global gradient
/// norm. Returns the gradient norm measured before clipping.
double adam_step(std::span<DenseMatrix* const> params, std::span<const DenseMatrix* const> grads,
                 OptimizerState& state, const AdamConfig& config);

double adam_step(VelocityFieldParams& params, const LayerGrads& grads, OptimizerState& state,
                 const AdamConfig& config);

// ---------------------------------------------------------------------------
// Flow matching

enum class LrSchedule { constant, cosine };

std::string_view to_string(LrSchedule schedule);
LrSchedule parse_lr_schedule(std::string_view name);

struct TrainConfig {
  Index steps = 100000;
  Index batch = 256;
  double base_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  LrSchedule lr_schedule = LrSchedule::constant;
  Index warmup_steps = 0;
  double max_grad_norm = 0.0;
  double ema_rate = 0.999;
  std::uint64_t seed = 0;
  Index log_every = 1;
  Index checkpoint_every = 0;

  /// 100k steps, batch 256, Adam (0.9, 0.999), constant lr 1e-4, no weight decay.
  static TrainConfig toy();
  /// Batch 256, AdamW, lr 1e-4 with 2500 warmup steps then cosine, clip 1.0, EMA 0.9999.
  static TrainConfig feature();

  void validate() const;
  double learning_rate(Index step) const;
  AdamConfig adam(double lr) const;
};

struct FmLossResult {
  double loss = 0.0;
  LayerGrads grads;
};

/// Mean over the batch of |v((1-t) x0 + t x1, t) - (x1 - x0)|^2, compensated summation.
double fm_loss(const VelocityField& field, const DenseMatrix& x0, const DenseMatrix& x1,
               const DenseVector& t);

/// Same loss together with its gradient with respect to every network parameter.
FmLossResult fm_loss_and_grad(const VelocityFieldParams& params, const DenseMatrix& x0,
                              const DenseMatrix& x1, const DenseVector& t);

/// One row of the training log.
struct TrainRecord {
  Index step = 0;
  double fm_loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

/// Everything needed to resume training bit-exactly.
struct TrainingState {
  VelocityFieldParams params;
  VelocityFieldParams ema;
  OptimizerState optimizer;
  Index step = 0;

  static TrainingState fresh(const FlowNetConfig& config, std::uint64_t seed);
};

/// Draws n target samples from a per-step stream.
using TargetSampler = std::function<DenseMatrix(Index n, Rng& rng)>;

/// Sampler drawing rows of a fixed dataset uniformly with replacement.
TargetSampler dataset_sampler(DenseMatrix data);

/// Raised when the loss becomes non-finite; carries the last finite state.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, TrainingState last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const TrainingState& last_good() const { return last_good_; }

 private:
  TrainingState last_good_;
};

struct TrainHooks {
  std::function<void(const TrainRecord&)> on_record;
  std::function<void(const TrainingState&)> on_checkpoint;
};

/// Runs flow-matching training from state.step up to config.steps. Step k draws its batch,
/// noise and times from stream kTrainStep + k, so resuming from a saved state reproduces the
/// uninterrupted run exactly.
void train_flow(TrainingState& state, const TargetSampler& target, const TrainConfig& config,
                const TrainHooks& hooks = {});

/// Integrates from z0 ~ N(0, I) at t=0 to t=1.
DenseMatrix sample_ode(const VelocityField& field, Index n, Index steps, OdeMethod method, Rng& rng);

/// Exponential moving average with window w (alpha = 2 / (w + 1)), seeded by the first value.
std::vector<double> smooth_ema(std::span<const double> values, Index window = 100);

}  // namespace flowalign

#endif  // FLOWALIGN_TRAINING_HPP
