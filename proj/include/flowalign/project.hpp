#ifndef FLOWALIGN_PROJECT_HPP
#define FLOWALIGN_PROJECT_HPP

#include "flowalign/numerics.hpp"
#include "flowalign/rng.hpp"

#include <cstdint>
#include <string_view>

namespace flowalign {

enum class ProjectionKind { random, avg_pool, pca };

std::string_view to_string(ProjectionKind kind);
ProjectionKind parse_projection_kind(std::string_view name);

/// Frozen linear map from R^source_dim to R^target_dim.
///
/// random:   rows of `weight` are i.i.d. N(0, 1/source_dim); `jl_rescale` multiplies the
///           output by sqrt(source_dim / target_dim) so squared norms are preserved on average.
/// avg_pool: mean over contiguous coordinate groups of size source_dim / target_dim.
/// pca:      rows of `weight` are the leading principal directions of the fitted data, applied
///           without centering or whitening so the map stays linear.
struct ProjectionSpec {
  ProjectionKind kind = ProjectionKind::random;
  Index source_dim = 0;
  Index target_dim = 0;
  std::uint64_t seed = 0;
  bool jl_rescale = false;
  DenseMatrix weight;              // target_dim x source_dim (random, pca); empty for avg_pool
  DenseVector explained_variance;  // pca only: variance fraction per retained direction

  void validate() const;
  bool operator==(const ProjectionSpec&) const = default;
};

ProjectionSpec make_random_projection(Index source_dim, Index target_dim, Rng& rng, bool jl_rescale = false);
ProjectionSpec make_avg_pool(Index source_dim, Index target_dim);
ProjectionSpec make_pca(const DenseMatrix& data, Index target_dim);

/// Dispatches on kind; `data` is only read for pca.
ProjectionSpec make_projection(ProjectionKind kind, Index source_dim, Index target_dim,
                               const DenseMatrix& data, Rng& rng);

/// Maps each row of x (n x source_dim) to n x target_dim.
DenseMatrix apply(const ProjectionSpec& spec, const DenseMatrix& x);

}  // namespace flowalign

#endif  // FLOWALIGN_PROJECT_HPP
