#ifndef FLOWALIGN_FLOWNET_HPP
#define FLOWALIGN_FLOWNET_HPP

#include "flowalign/numerics.hpp"
#include "flowalign/rng.hpp"
#include "flowalign/velocity_field.hpp"

#include <memory>
#include <string_view>
#include <vector>

namespace flowalign {

enum class FlowNetVariant { toy, feature };

std::string_view to_string(FlowNetVariant variant);
FlowNetVariant parse_flownet_variant(std::string_view name);

/// Shape of the AdaLN-MLP velocity field.
///
/// Time enters through a sinusoidal embedding of `time_scale * t` with `time_embed_dim`
/// channels (periods on a geometric ladder from 1 to 1e4), followed by a two-layer MLP.
/// Each residual block computes
///
///     h <- h + gate * W2 GELU(W1 (LN(h) * (1 + scale) + shift))
///
/// with (shift, scale, gate) produced from the time embedding.
struct FlowNetConfig {
  Index in_dim = 2;
  Index hidden = 512;
  Index blocks = 4;
  Index time_embed_dim = 128;
  double time_scale = 100.0;
  FlowNetVariant variant = FlowNetVariant::toy;

  /// 2 -> 2, hidden 512, 4 residual blocks.
  static FlowNetConfig toy();
  /// in_dim -> in_dim, hidden 1024, 6 residual blocks.
  static FlowNetConfig feature(Index in_dim);

  void validate() const;
  bool operator==(const FlowNetConfig&) const = default;
};

struct ResidualBlockParams {
  DenseMatrix mod_w;  // hidden x 3*hidden, columns [shift | scale | gate]
  DenseMatrix mod_b;  // 1 x 3*hidden
  DenseMatrix w1;     // hidden x hidden
  DenseMatrix b1;     // 1 x hidden
  DenseMatrix w2;     // hidden x hidden
  DenseMatrix b2;     // 1 x hidden
};

/// All weights of the velocity field. Weights are stored (fan_in x fan_out) and applied as
/// x * W + b. The same layout doubles as the gradient container.
struct VelocityFieldParams {
  FlowNetConfig config;
  DenseMatrix time_w1, time_b1;  // time_embed_dim x hidden, 1 x hidden
  DenseMatrix time_w2, time_b2;  // hidden x hidden, 1 x hidden
  DenseMatrix in_w, in_b;        // in_dim x hidden, 1 x hidden
  std::vector<ResidualBlockParams> blocks;
  DenseMatrix out_w, out_b;  // hidden x in_dim, 1 x in_dim

  /// All-zero tensors with the shapes implied by `config`.
  static VelocityFieldParams zeros(const FlowNetConfig& config);

  /// Visits every tensor in declaration order.
  template <typename F>
  void for_each_tensor(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each_tensor(F&& f) const { visit(*this, f); }

  std::vector<DenseMatrix*> tensors();
  std::vector<const DenseMatrix*> tensors() const;

  Index parameter_count() const;
  bool same_shape(const VelocityFieldParams& other) const;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(self.time_w1); f(self.time_b1); f(self.time_w2); f(self.time_b2);
    f(self.in_w); f(self.in_b);
    for (auto& b : self.blocks) {
      f(b.mod_w); f(b.mod_b); f(b.w1); f(b.b1); f(b.w2); f(b.b2);
    }
    f(self.out_w); f(self.out_b);
  }
};

using LayerGrads = VelocityFieldParams;

/// Closed-form parameter count for a configuration.
Index parameter_count(const FlowNetConfig& config);

/// Fan-in scaled normal init; the gate columns of every modulation head and the output
/// projection start at zero, so a fresh network outputs exactly 0.
VelocityFieldParams init_params(const FlowNetConfig& config, Rng& rng);

/// Activations retained by a forward pass.
struct FlowNetCache {
  DenseMatrix z;
  DenseVector t;
  DenseMatrix embedding;
  DenseMatrix time_pre1, time_hidden, time_pre2, time_features;
  std::vector<DenseMatrix> modulation;  // per block, batch x 3*hidden
  std::vector<DenseMatrix> block_input;
  std::vector<LayerNormResult<double>> block_norm;
  std::vector<DenseMatrix> block_mod_in;  // LN(h)(1+scale)+shift
  std::vector<DenseMatrix> block_pre;     // W1 u + b1
  std::vector<DenseMatrix> block_branch;  // W2 GELU(.) + b2
  LayerNormResult<double> final_norm;
  DenseMatrix output;
};

/// Sinusoidal embedding [cos(w_k s t), sin(w_k s t)], w_k = 1e4^(-k/half).
DenseMatrix time_embedding(const DenseVector& t, Index dim, double time_scale);

FlowNetCache flownet_forward(const VelocityFieldParams& params, const DenseMatrix& z,
                             const DenseVector& t);

/// v_theta(z_i, t_i) for every row.
DenseMatrix velocity(const VelocityFieldParams& params, const DenseMatrix& z, const DenseVector& t);

/// Reverse pass from dL/dv. Accumulates parameter gradients into `grads` when non-null
/// and returns dL/dz.
DenseMatrix flownet_backward(const VelocityFieldParams& params, const FlowNetCache& cache,
                             const DenseMatrix& upstream, LayerGrads* grads);

struct VelocityBackward {
  LayerGrads grads;
  DenseMatrix grad_z;
};

VelocityBackward velocity_backward(const VelocityFieldParams& params, const DenseMatrix& z,
                                   const DenseVector& t, const DenseMatrix& upstream);

/// Forward-mode directional derivative J dz, reusing a forward cache.
DenseMatrix flownet_tangent(const VelocityFieldParams& params, const FlowNetCache& cache,
                            const DenseMatrix& dz);

/// VelocityField adapter over shared, immutable parameters.
class FlowNet final : public VelocityField {
 public:
  explicit FlowNet(std::shared_ptr<const VelocityFieldParams> params);
  explicit FlowNet(VelocityFieldParams params);

  const VelocityFieldParams& params() const { return *params_; }

  Index dim() const override { return params_->config.in_dim; }
  DenseMatrix velocity(const DenseMatrix& z, const DenseVector& t) const override;
  DenseMatrix input_gradient(const DenseMatrix& z, const DenseVector& t,
                             const DenseMatrix& upstream) const override;
  DenseMatrix tangent(const DenseMatrix& z, const DenseVector& t, const DenseMatrix& dz) const override;
  DenseMatrix velocity_and_pullback(const DenseMatrix& z, const DenseVector& t,
                                    const std::function<DenseMatrix(const DenseMatrix&)>& upstream_of,
                                    DenseMatrix* grad_z) const override;
  DenseVector divergence(const DenseMatrix& z, const DenseVector& t) const override;

 private:
  std::shared_ptr<const VelocityFieldParams> params_;
};

}  // namespace flowalign

#endif  // FLOWALIGN_FLOWNET_HPP
