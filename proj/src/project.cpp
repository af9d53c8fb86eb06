#include "flowalign/project.hpp"

#include <cmath>
#include <string>

namespace flowalign {

namespace {

void check_dims(Index source_dim, Index target_dim) {
  if (target_dim < 1 || source_dim < target_dim) {
    throw std::invalid_argument("projection: need 1 <= target dim <= source dim, got " +
                                std::to_string(target_dim) + " and " + std::to_string(source_dim));
  }
}

}  // namespace

std::string_view to_string(ProjectionKind kind) {
  switch (kind) {
    case ProjectionKind::random: return "random";
    case ProjectionKind::avg_pool: return "avg_pool";
    case ProjectionKind::pca: return "pca";
  }
  return "unknown";
}

ProjectionKind parse_projection_kind(std::string_view name) {
  if (name == "random") return ProjectionKind::random;
  if (name == "avg_pool") return ProjectionKind::avg_pool;
  if (name == "pca") return ProjectionKind::pca;
  throw std::invalid_argument("unknown projection kind '" + std::string(name) + "'");
}

void ProjectionSpec::validate() const {
  check_dims(source_dim, target_dim);
  if (kind == ProjectionKind::avg_pool) {
    if (source_dim % target_dim != 0) {
      throw std::invalid_argument("avg_pool: source dim " + std::to_string(source_dim) +
                                  " is not divisible by target dim " + std::to_string(target_dim));
    }
    return;
  }
  if (weight.rows() != target_dim || weight.cols() != source_dim) {
    throw std::invalid_argument("projection: weight " + shape_string(weight) + " does not match " +
                                std::to_string(target_dim) + "x" + std::to_string(source_dim));
  }
  ensure_finite(weight, "projection weight");
}

ProjectionSpec make_random_projection(Index source_dim, Index target_dim, Rng& rng, bool jl_rescale) {
  check_dims(source_dim, target_dim);
  ProjectionSpec s;
  s.kind = ProjectionKind::random;
  s.source_dim = source_dim;
  s.target_dim = target_dim;
  s.seed = rng.seed();
  s.jl_rescale = jl_rescale;
  s.weight = rng.normal_matrix(target_dim, source_dim) / std::sqrt(static_cast<double>(source_dim));
  return s;
}

ProjectionSpec make_avg_pool(Index source_dim, Index target_dim) {
  ProjectionSpec s;
  s.kind = ProjectionKind::avg_pool;
  s.source_dim = source_dim;
  s.target_dim = target_dim;
  s.validate();
  return s;
}

ProjectionSpec make_pca(const DenseMatrix& data, Index target_dim) {
  check_dims(data.cols(), target_dim);
  if (data.rows() < target_dim || data.rows() < 2) {
    throw std::invalid_argument("pca: need at least max(2, target dim) = " +
                                std::to_string(std::max<Index>(2, target_dim)) + " samples, got " +
                                std::to_string(data.rows()));
  }
  ensure_finite(data, "pca data");
  const DenseMatrix centered = data.rowwise() - data.colwise().mean();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(data.rows() - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("pca: eigendecomposition failed");

  ProjectionSpec s;
  s.kind = ProjectionKind::pca;
  s.source_dim = data.cols();
  s.target_dim = target_dim;
  s.weight.resize(target_dim, data.cols());
  s.explained_variance.resize(target_dim);
  const double total = std::max(eig.eigenvalues().sum(), 0.0);
  for (Index k = 0; k < target_dim; ++k) {
    // Eigenvalues come in increasing order.
    const Index col = data.cols() - 1 - k;
    Eigen::VectorXd dir = eig.eigenvectors().col(col);
    Index pivot;
    dir.cwiseAbs().maxCoeff(&pivot);
    if (dir[pivot] < 0) dir = -dir;  // deterministic sign
    s.weight.row(k) = dir.transpose();
    s.explained_variance[k] = total > 0.0 ? std::max(eig.eigenvalues()[col], 0.0) / total : 0.0;
  }
  return s;
}

ProjectionSpec make_projection(ProjectionKind kind, Index source_dim, Index target_dim,
                               const DenseMatrix& data, Rng& rng) {
  switch (kind) {
    case ProjectionKind::random: return make_random_projection(source_dim, target_dim, rng);
    case ProjectionKind::avg_pool: return make_avg_pool(source_dim, target_dim);
    case ProjectionKind::pca:
      if (data.cols() != source_dim) {
        throw std::invalid_argument("pca: data " + shape_string(data) + " does not have " +
                                    std::to_string(source_dim) + " columns");
      }
      return make_pca(data, target_dim);
  }
  throw std::invalid_argument("make_projection: unknown kind");
}

DenseMatrix apply(const ProjectionSpec& spec, const DenseMatrix& x) {
  spec.validate();
  if (x.cols() != spec.source_dim) {
    throw std::invalid_argument("apply: input " + shape_string(x) + " does not have " +
                                std::to_string(spec.source_dim) + " columns");
  }
  if (spec.kind == ProjectionKind::avg_pool) {
    const Index group = spec.source_dim / spec.target_dim;
    DenseMatrix out(x.rows(), spec.target_dim);
    for (Index j = 0; j < spec.target_dim; ++j) {
      out.col(j) = x.middleCols(j * group, group).rowwise().sum() / static_cast<double>(group);
    }
    return out;
  }
  DenseMatrix out = matmul(x, spec.weight.transpose());
  if (spec.kind == ProjectionKind::random && spec.jl_rescale) {
    out *= std::sqrt(static_cast<double>(spec.source_dim) / static_cast<double>(spec.target_dim));
  }
  return out;
}

}  // namespace flowalign
