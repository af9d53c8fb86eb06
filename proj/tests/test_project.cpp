#include "flowalign/project.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace flowalign;

TEST(AvgPool, EqualDimensionsIsIdentity) {
  Rng rng(1);
  const DenseMatrix x = rng.normal_matrix(7, 6);
  EXPECT_EQ(apply(make_avg_pool(6, 6), x), x);
}

TEST(AvgPool, ContiguousGroups) {
  const DenseMatrix x = (DenseMatrix(1, 4) << 2, 4, 6, 8).finished();
  const DenseMatrix y = apply(make_avg_pool(4, 2), x);
  EXPECT_EQ(y(0, 0), 3.0);
  EXPECT_EQ(y(0, 1), 7.0);
}

TEST(AvgPool, RequiresDivisibility) {
  EXPECT_THROW(make_avg_pool(10, 3), std::invalid_argument);
  EXPECT_THROW(make_avg_pool(3, 4), std::invalid_argument);
  EXPECT_THROW(make_avg_pool(3, 0), std::invalid_argument);
}

TEST(Pca, RankOneDataIsCapturedByFirstComponent) {
  Rng rng(2);
  const DenseRowVector u = rng.normal_matrix(1, 10).row(0).normalized();
  const DenseVector coeff = rng.normal_matrix(200, 1).col(0) * 3.0;
  const DenseMatrix data = coeff * u;
  const ProjectionSpec s = make_pca(data, 2);
  EXPECT_GT(s.explained_variance[0], 0.999);
  EXPECT_LT(std::abs(std::abs(s.weight.row(0).dot(u)) - 1.0), 1e-12);
  // Projection onto the first direction reproduces the coefficients up to sign.
  const DenseMatrix y = apply(s, data);
  EXPECT_LT((y.col(0).cwiseAbs() - coeff.cwiseAbs()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pca, OrthonormalRowsAndDeterministicSign) {
  Rng rng(3);
  const DenseMatrix data = rng.normal_matrix(300, 5) * (DenseVector(5) << 5, 4, 3, 2, 1).finished().asDiagonal();
  const ProjectionSpec s = make_pca(data, 3);
  EXPECT_LT((s.weight * s.weight.transpose() - DenseMatrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(make_pca(data, 3), s);
  EXPECT_GE(s.explained_variance[0], s.explained_variance[1]);
  EXPECT_GE(s.explained_variance[1], s.explained_variance[2]);
}

TEST(Pca, NeedsEnoughSamples) {
  EXPECT_THROW(make_pca(DenseMatrix::Ones(2, 10), 3), std::invalid_argument);
  EXPECT_THROW(make_pca(DenseMatrix::Ones(5, 2), 3), std::invalid_argument);
}

TEST(RandomProjection, EntryVarianceIsInverseSourceDim) {
  Rng rng(4);
  const ProjectionSpec s = make_random_projection(768, 32, rng);
  const double n = static_cast<double>(s.weight.size());
  const double mean = s.weight.mean();
  const double var = (s.weight.array() - mean).square().sum() / (n - 1);
  EXPECT_NEAR(var * 768.0, 1.0, 0.05);
}

TEST(RandomProjection, OutputMomentsOverFreshMatrices) {
  // For fixed x, (Wx)_i over fresh W has mean 0 and variance |x|^2 / d2.
  const Index d2 = 64, d1 = 4, draws = 10000;
  Rng xr(5);
  const DenseMatrix x = xr.normal_matrix(1, d2);
  double sum = 0.0, sq = 0.0;
  for (Index k = 0; k < draws; ++k) {
    Rng rng(6, static_cast<std::uint64_t>(k));
    const DenseMatrix y = apply(make_random_projection(d2, d1, rng), x);
    sum += y.sum();
    sq += y.squaredNorm();
  }
  const double n = static_cast<double>(draws * d1);
  const double expected_var = x.squaredNorm() / static_cast<double>(d2);
  EXPECT_NEAR(sum / n, 0.0, 4 * std::sqrt(expected_var / n));
  EXPECT_NEAR((sq / n) / expected_var, 1.0, 0.05);
}

TEST(RandomProjection, JohnsonLindenstraussDistortion) {
  Rng data_rng(7);
  const DenseMatrix x = data_rng.normal_matrix(100, 768);
  Rng rng(8);
  const DenseMatrix y = apply(make_random_projection(768, 128, rng, true), x);
  int within = 0, pairs = 0;
  for (Index i = 0; i < 100; ++i) {
    for (Index j = i + 1; j < 100; ++j) {
      const double ratio = (y.row(i) - y.row(j)).squaredNorm() / (x.row(i) - x.row(j)).squaredNorm();
      within += (ratio >= 0.7 && ratio <= 1.3);
      ++pairs;
    }
  }
  EXPECT_EQ(pairs, 4950);
  EXPECT_GE(within, static_cast<int>(std::ceil(0.95 * pairs)));
}

TEST(Projection, AllKindsAreLinear) {
  Rng rng(9);
  const DenseMatrix data = rng.normal_matrix(50, 12);
  const ProjectionSpec specs[] = {make_random_projection(12, 3, rng), make_avg_pool(12, 3), make_pca(data, 3),
                                  make_random_projection(12, 3, rng, true)};
  const DenseMatrix x = rng.normal_matrix(6, 12);
  const DenseMatrix z = rng.normal_matrix(6, 12);
  const double a = 1.7, b = -0.4;
  for (const ProjectionSpec& s : specs) {
    const DenseMatrix lhs = apply(s, DenseMatrix(a * x + b * z));
    const DenseMatrix rhs = a * apply(s, x) + b * apply(s, z);
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12) << to_string(s.kind);
    EXPECT_EQ(apply(s, x), apply(s, x));
  }
}

TEST(Projection, DimensionMismatchAndParsing) {
  EXPECT_THROW(apply(make_avg_pool(4, 2), DenseMatrix::Zero(1, 5)), std::invalid_argument);
  Rng rng(10);
  EXPECT_THROW(make_random_projection(4, 5, rng), std::invalid_argument);
  for (ProjectionKind k : {ProjectionKind::random, ProjectionKind::avg_pool, ProjectionKind::pca}) {
    EXPECT_EQ(parse_projection_kind(to_string(k)), k);
  }
  EXPECT_THROW(parse_projection_kind("umap"), std::invalid_argument);
}
