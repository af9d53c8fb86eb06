#include "flowalign/flownet.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace flowalign {

namespace {

void add_bias(DenseMatrix& x, const DenseMatrix& b) { x.rowwise() += b.row(0); }

DenseMatrix affine(const DenseMatrix& x, const DenseMatrix& w, const DenseMatrix& b) {
  DenseMatrix out(x.rows(), w.cols());
  out.noalias() = x * w;
  add_bias(out, b);
  return out;
}

// Accumulates dW += x^T dy and db += colsum(dy).
void accumulate_affine(const DenseMatrix& x, const DenseMatrix& dy, DenseMatrix& dw,
                       DenseMatrix& db) {
  dw.noalias() += x.transpose() * dy;
  db += dy.colwise().sum();
}

DenseMatrix fan_in_normal(Rng& rng, Index fan_in, Index fan_out) {
  return rng.normal_matrix(fan_in, fan_out) / std::sqrt(static_cast<double>(fan_in));
}

}  // namespace

std::string_view to_string(FlowNetVariant variant) {
  return variant == FlowNetVariant::toy ? "toy" : "feature";
}

FlowNetVariant parse_flownet_variant(std::string_view name) {
  if (name == "toy") return FlowNetVariant::toy;
  if (name == "feature") return FlowNetVariant::feature;
  throw std::invalid_argument("unknown flownet variant '" + std::string(name) + "'");
}

FlowNetConfig FlowNetConfig::toy() { return FlowNetConfig{}; }

FlowNetConfig FlowNetConfig::feature(Index in_dim) {
  FlowNetConfig c;
  c.in_dim = in_dim;
  c.hidden = 1024;
  c.blocks = 6;
  c.variant = FlowNetVariant::feature;
  return c;
}

void FlowNetConfig::validate() const {
  if (in_dim < 1) throw std::invalid_argument("flownet: in_dim must be >= 1");
  if (hidden < 2) throw std::invalid_argument("flownet: hidden must be >= 2");
  if (blocks < 0) throw std::invalid_argument("flownet: blocks must be >= 0");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
    throw std::invalid_argument("flownet: time_embed_dim must be even and >= 2");
  }
  if (!(time_scale > 0.0) || !std::isfinite(time_scale)) {
    throw std::invalid_argument("flownet: time_scale must be positive");
  }
}

VelocityFieldParams VelocityFieldParams::zeros(const FlowNetConfig& c) {
  c.validate();
  VelocityFieldParams p;
  p.config = c;
  const Index h = c.hidden;
  p.time_w1 = DenseMatrix::Zero(c.time_embed_dim, h);
  p.time_b1 = DenseMatrix::Zero(1, h);
  p.time_w2 = DenseMatrix::Zero(h, h);
  p.time_b2 = DenseMatrix::Zero(1, h);
  p.in_w = DenseMatrix::Zero(c.in_dim, h);
  p.in_b = DenseMatrix::Zero(1, h);
  p.blocks.resize(static_cast<std::size_t>(c.blocks));
  for (auto& b : p.blocks) {
    b.mod_w = DenseMatrix::Zero(h, 3 * h);
    b.mod_b = DenseMatrix::Zero(1, 3 * h);
    b.w1 = DenseMatrix::Zero(h, h);
    b.b1 = DenseMatrix::Zero(1, h);
    b.w2 = DenseMatrix::Zero(h, h);
    b.b2 = DenseMatrix::Zero(1, h);
  }
  p.out_w = DenseMatrix::Zero(h, c.in_dim);
  p.out_b = DenseMatrix::Zero(1, c.in_dim);
  return p;
}

std::vector<DenseMatrix*> VelocityFieldParams::tensors() {
  std::vector<DenseMatrix*> out;
  for_each_tensor([&out](DenseMatrix& m) { out.push_back(&m); });
  return out;
}

std::vector<const DenseMatrix*> VelocityFieldParams::tensors() const {
  std::vector<const DenseMatrix*> out;
  for_each_tensor([&out](const DenseMatrix& m) { out.push_back(&m); });
  return out;
}

Index VelocityFieldParams::parameter_count() const {
  Index n = 0;
  for_each_tensor([&n](const DenseMatrix& m) { n += m.size(); });
  return n;
}

bool VelocityFieldParams::same_shape(const VelocityFieldParams& other) const {
  const auto a = tensors();
  const auto b = other.tensors();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->rows() != b[i]->rows() || a[i]->cols() != b[i]->cols()) return false;
  }
  return true;
}

Index parameter_count(const FlowNetConfig& c) {
  const Index h = c.hidden;
  const Index time = c.time_embed_dim * h + h + h * h + h;
  const Index input = c.in_dim * h + h;
  const Index block = h * 3 * h + 3 * h + 2 * (h * h + h);
  const Index output = h * c.in_dim + c.in_dim;
  return time + input + c.blocks * block + output;
}

VelocityFieldParams init_params(const FlowNetConfig& c, Rng& rng) {
  VelocityFieldParams p = VelocityFieldParams::zeros(c);
  const Index h = c.hidden;
  p.time_w1 = fan_in_normal(rng, c.time_embed_dim, h);
  p.time_w2 = fan_in_normal(rng, h, h);
  p.in_w = fan_in_normal(rng, c.in_dim, h);
  for (auto& b : p.blocks) {
    b.mod_w.leftCols(2 * h) = fan_in_normal(rng, h, 2 * h);
    b.w1 = fan_in_normal(rng, h, h);
    b.w2 = fan_in_normal(rng, h, h);
  }
  return p;
}

DenseMatrix time_embedding(const DenseVector& t, Index dim, double time_scale) {
  const Index half = dim / 2;
  DenseMatrix emb(t.size(), dim);
  const double log_period = std::log(1e4);
  for (Index k = 0; k < half; ++k) {
    const double freq = time_scale * std::exp(-log_period * static_cast<double>(k) / half);
    for (Index i = 0; i < t.size(); ++i) {
      const double arg = freq * t[i];
      emb(i, k) = std::cos(arg);
      emb(i, half + k) = std::sin(arg);
    }
  }
  return emb;
}

FlowNetCache flownet_forward(const VelocityFieldParams& p, const DenseMatrix& z,
                             const DenseVector& t) {
  const FlowNetConfig& c = p.config;
  const Index h = c.hidden;
  if (z.cols() != c.in_dim || t.size() != z.rows()) {
    throw std::invalid_argument("flownet: input " + shape_string(z) + " with " +
                                std::to_string(t.size()) + " times, expected in_dim " +
                                std::to_string(c.in_dim));
  }
  for (Index i = 0; i < t.size(); ++i) {
    if (!(t[i] >= 0.0 && t[i] <= 1.0)) {
      throw std::invalid_argument("flownet: time " + std::to_string(t[i]) + " outside [0, 1]");
    }
  }

  FlowNetCache cache;
  cache.z = z;
  cache.t = t;
  cache.embedding = time_embedding(t, c.time_embed_dim, c.time_scale);
  cache.time_pre1 = affine(cache.embedding, p.time_w1, p.time_b1);
  cache.time_hidden = gelu(cache.time_pre1);
  cache.time_pre2 = affine(cache.time_hidden, p.time_w2, p.time_b2);
  cache.time_features = gelu(cache.time_pre2);

  DenseMatrix hidden = affine(z, p.in_w, p.in_b);
  for (const auto& b : p.blocks) {
    DenseMatrix mod = affine(cache.time_features, b.mod_w, b.mod_b);
    cache.block_input.push_back(hidden);
    LayerNormResult<double> norm = layer_norm_forward(hidden);
    DenseMatrix u = norm.normalized.cwiseProduct((mod.middleCols(h, h).array() + 1.0).matrix()) +
                    mod.leftCols(h);
    DenseMatrix pre = affine(u, b.w1, b.b1);
    DenseMatrix branch = affine(gelu(pre), b.w2, b.b2);
    hidden += mod.rightCols(h).cwiseProduct(branch);

    cache.modulation.push_back(std::move(mod));
    cache.block_norm.push_back(std::move(norm));
    cache.block_mod_in.push_back(std::move(u));
    cache.block_pre.push_back(std::move(pre));
    cache.block_branch.push_back(std::move(branch));
  }
  cache.final_norm = layer_norm_forward(hidden);
  cache.output = affine(cache.final_norm.normalized, p.out_w, p.out_b);
  FLOWALIGN_DEBUG_FINITE(cache.output, "flownet_forward");
  return cache;
}

DenseMatrix velocity(const VelocityFieldParams& params, const DenseMatrix& z, const DenseVector& t) {
  return flownet_forward(params, z, t).output;
}

DenseMatrix flownet_backward(const VelocityFieldParams& p, const FlowNetCache& cache,
                             const DenseMatrix& upstream, LayerGrads* grads) {
  const Index h = p.config.hidden;
  if (upstream.rows() != cache.output.rows() || upstream.cols() != cache.output.cols()) {
    throw std::invalid_argument("flownet_backward: upstream " + shape_string(upstream) +
                                " does not match output " + shape_string(cache.output));
  }
  if (grads != nullptr && !grads->same_shape(p)) {
    throw std::invalid_argument("flownet_backward: gradient container has the wrong shape");
  }

  DenseMatrix d_hidden = layer_norm_backward(cache.final_norm, upstream * p.out_w.transpose());
  DenseMatrix d_time_features;
  if (grads != nullptr) {
    accumulate_affine(cache.final_norm.normalized, upstream, grads->out_w, grads->out_b);
    d_time_features = DenseMatrix::Zero(cache.time_features.rows(), h);
  }

  for (Index k = p.config.blocks - 1; k >= 0; --k) {
    const auto ku = static_cast<std::size_t>(k);
    const ResidualBlockParams& b = p.blocks[ku];
    const DenseMatrix& mod = cache.modulation[ku];
    const auto& norm = cache.block_norm[ku];

    const DenseMatrix d_branch = d_hidden.cwiseProduct(mod.rightCols(h));
    const DenseMatrix d_pre =
        gelu_backward(cache.block_pre[ku], d_branch * b.w2.transpose());
    const DenseMatrix d_u = d_pre * b.w1.transpose();
    const DenseMatrix one_plus_scale = (mod.middleCols(h, h).array() + 1.0).matrix();

    if (grads != nullptr) {
      ResidualBlockParams& g = grads->blocks[ku];
      accumulate_affine(gelu(cache.block_pre[ku]), d_branch, g.w2, g.b2);
      accumulate_affine(cache.block_mod_in[ku], d_pre, g.w1, g.b1);
      DenseMatrix d_mod(mod.rows(), 3 * h);
      d_mod.leftCols(h) = d_u;
      d_mod.middleCols(h, h) = d_u.cwiseProduct(norm.normalized);
      d_mod.rightCols(h) = d_hidden.cwiseProduct(cache.block_branch[ku]);
      accumulate_affine(cache.time_features, d_mod, g.mod_w, g.mod_b);
      d_time_features.noalias() += d_mod * b.mod_w.transpose();
    }

    d_hidden += layer_norm_backward(norm, d_u.cwiseProduct(one_plus_scale));
  }

  DenseMatrix grad_z = d_hidden * p.in_w.transpose();
  if (grads != nullptr) {
    accumulate_affine(cache.z, d_hidden, grads->in_w, grads->in_b);
    const DenseMatrix d_pre2 = gelu_backward(cache.time_pre2, d_time_features);
    accumulate_affine(cache.time_hidden, d_pre2, grads->time_w2, grads->time_b2);
    const DenseMatrix d_pre1 = gelu_backward(cache.time_pre1, d_pre2 * p.time_w2.transpose());
    accumulate_affine(cache.embedding, d_pre1, grads->time_w1, grads->time_b1);
  }
  return grad_z;
}

VelocityBackward velocity_backward(const VelocityFieldParams& params, const DenseMatrix& z,
                                   const DenseVector& t, const DenseMatrix& upstream) {
  const FlowNetCache cache = flownet_forward(params, z, t);
  VelocityBackward out{VelocityFieldParams::zeros(params.config), DenseMatrix()};
  out.grad_z = flownet_backward(params, cache, upstream, &out.grads);
  return out;
}

DenseMatrix flownet_tangent(const VelocityFieldParams& p, const FlowNetCache& cache,
                            const DenseMatrix& dz) {
  const Index h = p.config.hidden;
  if (dz.rows() != cache.z.rows() || dz.cols() != cache.z.cols()) {
    throw std::invalid_argument("flownet_tangent: direction " + shape_string(dz) +
                                " does not match input " + shape_string(cache.z));
  }
  DenseMatrix d_hidden = dz * p.in_w;
  for (std::size_t k = 0; k < p.blocks.size(); ++k) {
    const ResidualBlockParams& b = p.blocks[k];
    const DenseMatrix& mod = cache.modulation[k];
    const DenseMatrix d_u = layer_norm_tangent(cache.block_norm[k], d_hidden)
                                .cwiseProduct((mod.middleCols(h, h).array() + 1.0).matrix());
    const DenseMatrix d_act = gelu_derivative(cache.block_pre[k]).cwiseProduct(d_u * b.w1);
    d_hidden += mod.rightCols(h).cwiseProduct(d_act * b.w2);
  }
  return layer_norm_tangent(cache.final_norm, d_hidden) * p.out_w;
}

// ---------------------------------------------------------------------------

FlowNet::FlowNet(std::shared_ptr<const VelocityFieldParams> params) : params_(std::move(params)) {
  if (!params_) throw std::invalid_argument("FlowNet: null parameters");
}

FlowNet::FlowNet(VelocityFieldParams params)
    : params_(std::make_shared<const VelocityFieldParams>(std::move(params))) {}

DenseMatrix FlowNet::velocity(const DenseMatrix& z, const DenseVector& t) const {
  return flownet_forward(*params_, z, t).output;
}

DenseMatrix FlowNet::input_gradient(const DenseMatrix& z, const DenseVector& t,
                                    const DenseMatrix& upstream) const {
  return flownet_backward(*params_, flownet_forward(*params_, z, t), upstream, nullptr);
}

DenseMatrix FlowNet::tangent(const DenseMatrix& z, const DenseVector& t, const DenseMatrix& dz) const {
  return flownet_tangent(*params_, flownet_forward(*params_, z, t), dz);
}

DenseMatrix FlowNet::velocity_and_pullback(
    const DenseMatrix& z, const DenseVector& t,
    const std::function<DenseMatrix(const DenseMatrix&)>& upstream_of, DenseMatrix* grad_z) const {
  FlowNetCache cache = flownet_forward(*params_, z, t);
  if (grad_z != nullptr) {
    *grad_z = flownet_backward(*params_, cache, upstream_of(cache.output), nullptr);
  }
  return std::move(cache.output);
}

DenseVector FlowNet::divergence(const DenseMatrix& z, const DenseVector& t) const {
  const FlowNetCache cache = flownet_forward(*params_, z, t);
  DenseVector trace = DenseVector::Zero(z.rows());
  DenseMatrix basis = DenseMatrix::Zero(z.rows(), dim());
  for (Index k = 0; k < dim(); ++k) {
    basis.col(k).setOnes();
    trace += flownet_tangent(*params_, cache, basis).col(k);
    basis.col(k).setZero();
  }
  return trace;
}

}  // namespace flowalign
