#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "contrastlab/core_math.hpp"
#include "contrastlab/error.hpp"

using namespace clab;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, ChildrenAreIndependentOfParentConsumption) {
  Rng a(7);
  Rng before = a.child("data");
  a.next_u64();
  a.normal();
  Rng after = a.child("data");
  for (int i = 0; i < 10; ++i) EXPECT_EQ(before.next_u64(), after.next_u64());
}

TEST(Rng, DistinctLabelsGiveDistinctStreams) {
  Rng root(7);
  Rng q = root.child("query-init"), k = root.child("key-init");
  EXPECT_NE(q.stream(), k.stream());
  EXPECT_NE(q.next_u64(), k.next_u64());
}

TEST(Rng, UniformStaysInOpenInterval) {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    EXPECT_GT(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(Rng, NormalMoments) {
  Rng rng(11);
  const int N = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < N; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  const double mean = sum / N;
  EXPECT_NEAR(mean, 0.0, 5.0 / std::sqrt(N));
  EXPECT_NEAR(sq / N - mean * mean, 1.0, 0.02);
}

TEST(Rng, BelowIsInRangeAndCoversIt) {
  Rng rng(5);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    ++hits[v];
  }
  for (int h : hits) EXPECT_GT(h, 800);
  EXPECT_THROW(rng.below(0), InvalidArgument);
}

TEST(GaussianMatrix, ZeroVarianceIsZero) {
  Rng rng(1);
  const Matrix m = gaussian_matrix(rng, 4, 6, 0.0);
  EXPECT_EQ(m.cwiseAbs().maxCoeff(), 0.0);
}

TEST(GaussianMatrix, Deterministic) {
  Rng a(9), b(9);
  const Matrix x = gaussian_matrix(a, 5, 3, 2.0);
  const Matrix y = gaussian_matrix(b, 5, 3, 2.0);
  EXPECT_EQ(std::memcmp(x.data(), y.data(), sizeof(double) * 15), 0);
}

TEST(GaussianMatrix, VarianceScales) {
  Rng rng(2);
  const Matrix m = gaussian_matrix(rng, 400, 400, 0.25);
  const double var = m.squaredNorm() / static_cast<double>(m.size());
  EXPECT_NEAR(var, 0.25, 0.01);
}

TEST(GaussianMatrix, RejectsBadArguments) {
  Rng rng(2);
  EXPECT_THROW(gaussian_matrix(rng, 0, 3, 1.0), ShapeError);
  EXPECT_THROW(gaussian_matrix(rng, 3, 3, -1.0), InvalidArgument);
  EXPECT_THROW(gaussian_matrix(rng, 3, 3, std::numeric_limits<double>::quiet_NaN()), InvalidArgument);
}

TEST(SpectralNorm, Identity) {
  EXPECT_NEAR(spectral_norm(Matrix::Identity(5, 5)), 1.0, 1e-12);
}

TEST(SpectralNorm, Diagonal) {
  Matrix d = Matrix::Zero(3, 3);
  d(0, 0) = 3.0;
  d(1, 1) = 1.0;
  d(2, 2) = 0.5;
  EXPECT_NEAR(spectral_norm(d), 3.0, 1e-8);
}

TEST(SpectralNorm, MatchesSvdOracle) {
  Rng rng(17);
  const Matrix a = gaussian_matrix(rng, 50, 80, 1.0);
  const Eigen::MatrixXd dense = a;
  const double oracle = Eigen::BDCSVD<Eigen::MatrixXd>(dense).singularValues()(0);
  EXPECT_NEAR(spectral_norm(a, {.tol = 1e-12, .max_steps = 100000}), oracle, 1e-6 * oracle);
}

TEST(SpectralNorm, ZeroMatrix) { EXPECT_EQ(spectral_norm(Matrix::Zero(4, 3)), 0.0); }

TEST(SpectralNorm, ThrowsWithLastEstimateWhenBudgetRunsOut) {
  Rng rng(4);
  const Matrix a = gaussian_matrix(rng, 30, 30, 1.0);
  try {
    spectral_norm(a, {.tol = 1e-15, .max_steps = 3});
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_EQ(e.steps(), 3);
    ASSERT_EQ(e.last_estimates().size(), 1u);
    EXPECT_GT(e.last_estimates()[0], 0.0);
  }
}

TEST(SpectralNorms, BatchedColumnsAreIndependent) {
  Matrix a = Matrix::Zero(2, 2), b = Matrix::Zero(2, 2);
  a(0, 0) = 2.0;
  a(1, 1) = 1.0;
  b(0, 1) = 5.0;
  b(1, 0) = 0.5;
  const Matrix* ops[] = {&a, &b};
  auto gram = [&](const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (Index c = 0; c < x.cols(); ++c) y.col(c) = ops[c]->transpose() * (*ops[c] * x.col(c));
    return y;
  };
  const auto s = spectral_norms(gram, 2, 2, {.tol = 1e-12});
  EXPECT_NEAR(s[0], 2.0, 1e-9);
  EXPECT_NEAR(s[1], 5.0, 1e-9);
}

TEST(LogSumExp, SingleZero) {
  const double v[] = {0.0};
  EXPECT_EQ(logsumexp(v), 0.0);
}

TEST(LogSumExp, ThreeZeros) {
  const double v[] = {0.0, 0.0, 0.0};
  EXPECT_NEAR(logsumexp(v), std::log(3.0), 1e-15);
}

TEST(LogSumExp, LargeValuesDoNotOverflow) {
  const double v[] = {1000.0, 1000.0};
  EXPECT_NEAR(logsumexp(v), 1000.0 + std::log(2.0), 1e-12);
}

TEST(LogSumExp, MinusInfinityEntriesAreIgnored) {
  const double inf = std::numeric_limits<double>::infinity();
  const double v[] = {-inf, 0.0};
  EXPECT_EQ(logsumexp(v), 0.0);
  const double all[] = {-inf, -inf};
  EXPECT_EQ(logsumexp(all), -inf);
}

TEST(LogSumExp, EmptyThrows) { EXPECT_THROW(logsumexp(std::span<const double>{}), ShapeError); }

TEST(Binomial, SmallValues) {
  EXPECT_EQ(binomial(7, 2), 21u);
  EXPECT_EQ(binomial(9, 3), 84u);
  EXPECT_EQ(binomial(5, 0), 1u);
  EXPECT_EQ(binomial(5, 5), 1u);
  EXPECT_EQ(binomial(3, 4), 0u);
  EXPECT_EQ(binomial(60, 30), 118264581564861424ull);
}

TEST(Binomial, Saturates) {
  EXPECT_EQ(binomial(200, 100), std::numeric_limits<std::uint64_t>::max());
}
