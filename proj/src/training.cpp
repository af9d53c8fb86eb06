#include "flowalign/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace flowalign {

OptimizerState OptimizerState::zeros_like(std::span<const DenseMatrix* const> params) {
  OptimizerState s;
  for (const DenseMatrix* p : params) {
    s.first_moment.push_back(DenseMatrix::Zero(p->rows(), p->cols()));
    s.second_moment.push_back(DenseMatrix::Zero(p->rows(), p->cols()));
  }
  return s;
}

double adam_step(std::span<DenseMatrix* const> params, std::span<const DenseMatrix* const> grads,
                 OptimizerState& state, const AdamConfig& config) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and moment counts differ");
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->rows() != grads[i]->rows() || params[i]->cols() != grads[i]->cols() ||
        params[i]->rows() != state.first_moment[i].rows() ||
        params[i]->cols() != state.first_moment[i].cols()) {
      throw std::invalid_argument("adam_step: shape mismatch in tensor " + std::to_string(i) +
                                  ": param " + shape_string(*params[i]) + ", grad " +
                                  shape_string(*grads[i]));
    }
    sq += grads[i]->squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const double clip =
      (config.max_grad_norm > 0.0 && norm > config.max_grad_norm) ? config.max_grad_norm / norm : 1.0;

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    DenseMatrix& m = state.first_moment[i];
    DenseMatrix& v = state.second_moment[i];
    const auto g = (*grads[i]) * clip;
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    DenseMatrix& p = *params[i];
    if (config.weight_decay != 0.0) p *= (1.0 - config.lr * config.weight_decay);
    p.array() -= config.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config.eps);
  }
  return norm;
}

double adam_step(VelocityFieldParams& params, const LayerGrads& grads, OptimizerState& state,
                 const AdamConfig& config) {
  if (!params.same_shape(grads)) {
    throw std::invalid_argument("adam_step: gradients do not mirror the parameters");
  }
  const std::vector<DenseMatrix*> p = params.tensors();
  const std::vector<const DenseMatrix*> g = grads.tensors();
  return adam_step(p, g, state, config);
}

// ---------------------------------------------------------------------------

std::string_view to_string(LrSchedule schedule) {
  return schedule == LrSchedule::constant ? "constant" : "cosine";
}

LrSchedule parse_lr_schedule(std::string_view name) {
  if (name == "constant") return LrSchedule::constant;
  if (name == "cosine") return LrSchedule::cosine;
  throw std::invalid_argument("unknown lr schedule '" + std::string(name) + "'");
}

TrainConfig TrainConfig::toy() { return TrainConfig{}; }

TrainConfig TrainConfig::feature() {
  TrainConfig c;
  c.weight_decay = 0.0;
  c.lr_schedule = LrSchedule::cosine;
  c.warmup_steps = 2500;
  c.max_grad_norm = 1.0;
  c.ema_rate = 0.9999;
  return c;
}

void TrainConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("train: steps must be >= 0");
  if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  if (!(base_lr > 0.0)) throw std::invalid_argument("train: base_lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("train: betas must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
  if (warmup_steps < 0) throw std::invalid_argument("train: warmup_steps must be >= 0");
  if (!(ema_rate >= 0.0 && ema_rate < 1.0)) throw std::invalid_argument("train: ema_rate must lie in [0, 1)");
  if (log_every < 1) throw std::invalid_argument("train: log_every must be >= 1");
  if (checkpoint_every < 0) throw std::invalid_argument("train: checkpoint_every must be >= 0");
}

double TrainConfig::learning_rate(Index step) const {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  if (lr_schedule == LrSchedule::constant) return base_lr;
  const double span = static_cast<double>(std::max<Index>(1, steps - warmup_steps));
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamConfig TrainConfig::adam(double lr) const {
  AdamConfig a;
  a.lr = lr;
  a.beta1 = beta1;
  a.beta2 = beta2;
  a.weight_decay = weight_decay;
  a.max_grad_norm = max_grad_norm;
  return a;
}

// ---------------------------------------------------------------------------

namespace {

void check_pair_batch(const DenseMatrix& x0, const DenseMatrix& x1, const DenseVector& t) {
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols() || t.size() != x0.rows()) {
    throw std::invalid_argument("fm_loss: batch shapes differ: x0 " + shape_string(x0) + ", x1 " +
                                shape_string(x1) + ", t " + std::to_string(t.size()));
  }
  if (x0.rows() == 0) throw std::invalid_argument("fm_loss: empty batch");
}

DenseMatrix interpolate(const DenseMatrix& x0, const DenseMatrix& x1, const DenseVector& t) {
  return (1.0 - t.array()).matrix().asDiagonal() * x0 + t.asDiagonal() * x1;
}

double mean_squared_rows(const DenseMatrix& r) {
  CompensatedSum sum;
  for (Index i = 0; i < r.rows(); ++i) sum.add(r.row(i).squaredNorm());
  return sum.value() / static_cast<double>(r.rows());
}

}  // namespace

double fm_loss(const VelocityField& field, const DenseMatrix& x0, const DenseMatrix& x1,
               const DenseVector& t) {
  check_pair_batch(x0, x1, t);
  const DenseMatrix r = field.velocity(interpolate(x0, x1, t), t) - (x1 - x0);
  const double loss = mean_squared_rows(r);
  if (!std::isfinite(loss)) throw NumericError("fm_loss: non-finite loss");
  return loss;
}

FmLossResult fm_loss_and_grad(const VelocityFieldParams& params, const DenseMatrix& x0,
                              const DenseMatrix& x1, const DenseVector& t) {
  check_pair_batch(x0, x1, t);
  const FlowNetCache cache = flownet_forward(params, interpolate(x0, x1, t), t);
  const DenseMatrix r = cache.output - (x1 - x0);
  FmLossResult out{mean_squared_rows(r), VelocityFieldParams::zeros(params.config)};
  if (!std::isfinite(out.loss)) throw NumericError("fm_loss: non-finite loss");
  const DenseMatrix upstream = r * (2.0 / static_cast<double>(r.rows()));
  flownet_backward(params, cache, upstream, &out.grads);
  return out;
}

TrainingState TrainingState::fresh(const FlowNetConfig& config, std::uint64_t seed) {
  Rng rng = Rng(seed).split(streams::kInit);
  TrainingState s;
  s.params = init_params(config, rng);
  s.ema = s.params;
  s.optimizer = OptimizerState::zeros_like(std::as_const(s.params).tensors());
  s.step = 0;
  return s;
}

TargetSampler dataset_sampler(DenseMatrix data) {
  if (data.rows() < 1) throw std::invalid_argument("dataset_sampler: empty dataset");
  return [data = std::move(data)](Index n, Rng& rng) {
    DenseMatrix out(n, data.cols());
    const auto rows = static_cast<std::uint64_t>(data.rows());
    for (Index i = 0; i < n; ++i) out.row(i) = data.row(static_cast<Index>(rng.below(rows)));
    return out;
  };
}

void train_flow(TrainingState& state, const TargetSampler& target, const TrainConfig& config,
                const TrainHooks& hooks) {
  config.validate();
  const Index dim = state.params.config.in_dim;
  const Rng root(config.seed);
  for (Index step = state.step; step < config.steps; ++step) {
    Rng rng = root.split(streams::kTrainStep + static_cast<std::uint64_t>(step));
    const DenseMatrix x1 = target(config.batch, rng);
    if (x1.rows() != config.batch || x1.cols() != dim) {
      throw std::invalid_argument("train_flow: target sampler returned " + shape_string(x1) +
                                  ", expected " + std::to_string(config.batch) + "x" +
                                  std::to_string(dim));
    }
    const DenseMatrix x0 = rng.normal_matrix(config.batch, dim);
    const DenseVector t = rng.uniform_vector(config.batch);

    FmLossResult result;
    try {
      result = fm_loss_and_grad(state.params, x0, x1, t);
    } catch (const NumericError& e) {
      throw TrainingDiverged("train_flow: loss diverged at step " + std::to_string(step) + ": " +
                                 e.what(),
                             state);
    }
    const double lr = config.learning_rate(step);
    TrainingState before = state;
    const double grad_norm = adam_step(state.params, result.grads, state.optimizer, config.adam(lr));
    bool finite = true;
    state.params.for_each_tensor([&finite](const DenseMatrix& m) { finite = finite && m.allFinite(); });
    if (!finite || !std::isfinite(grad_norm)) {
      throw TrainingDiverged("train_flow: parameters diverged at step " + std::to_string(step),
                             std::move(before));
    }

    const double keep = config.ema_rate;
    const auto live = std::as_const(state.params).tensors();
    const auto avg = state.ema.tensors();
    for (std::size_t i = 0; i < live.size(); ++i) {
      *avg[i] = keep * (*avg[i]) + (1.0 - keep) * (*live[i]);
    }
    state.step = step + 1;

    if (hooks.on_record && step % config.log_every == 0) {
      hooks.on_record(TrainRecord{step, result.loss, lr, grad_norm});
    }
    if (hooks.on_checkpoint && config.checkpoint_every > 0 &&
        state.step % config.checkpoint_every == 0) {
      hooks.on_checkpoint(state);
    }
  }
}

DenseMatrix sample_ode(const VelocityField& field, Index n, Index steps, OdeMethod method, Rng& rng) {
  OdeSolveConfig config{steps, method, OdeDirection::forward};
  return integrate(field, rng.normal_matrix(n, field.dim()), config);
}

std::vector<double> smooth_ema(std::span<const double> values, Index window) {
  std::vector<double> out;
  out.reserve(values.size());
  const double alpha = 2.0 / (static_cast<double>(window) + 1.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc = i == 0 ? values[0] : (1.0 - alpha) * acc + alpha * values[i];
    out.push_back(acc);
  }
  return out;
}

}  // namespace flowalign
