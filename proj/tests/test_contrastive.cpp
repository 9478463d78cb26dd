#include <gtest/gtest.h>

#include <bit>
#include <cmath>

#include "contrastlab/contrastive.hpp"
#include "contrastlab/error.hpp"
#include "contrastlab/oracle.hpp"
#include "tape.hpp"

using namespace clab;

namespace {

using VarMatrix = std::vector<std::vector<tape::Var>>;

Matrix random_outputs(std::uint64_t seed, std::size_t n, std::size_t d, double variance = 1.0) {
  Rng rng(seed);
  return gaussian_matrix(rng, static_cast<Index>(n), static_cast<Index>(d), variance);
}

VarMatrix to_vars(tape::Tape& t, const Matrix& m) {
  VarMatrix out(static_cast<std::size_t>(m.rows()));
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(r)].push_back(t.input(m(r, c)));
  }
  return out;
}

// Negative subsets of sample i as bit patterns over all n samples.
std::vector<std::vector<std::size_t>> subsets_excluding(std::size_t n, std::size_t k, std::size_t i) {
  std::vector<std::vector<std::size_t>> out;
  for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
    if (static_cast<std::size_t>(std::popcount(bits)) != k || (bits >> i) & 1u) continue;
    std::vector<std::size_t> s;
    for (std::size_t j = 0; j < n; ++j) {
      if ((bits >> j) & 1u) s.push_back(j);
    }
    out.push_back(s);
  }
  return out;
}

// L_S as a cross-entropy over the own key and k negatives, on raw logits.
tape::Var tape_total_loss(const VarMatrix& q, const VarMatrix& keys, std::size_t k) {
  const std::size_t n = q.size();
  std::vector<tape::Var> per_sample;
  for (std::size_t i = 0; i < n; ++i) {
    const auto subsets = subsets_excluding(n, k, i);
    std::vector<tape::Var> terms;
    for (const auto& s : subsets) {
      std::vector<tape::Var> logits{tape::dot(q[i], keys[i])};
      for (std::size_t j : s) logits.push_back(tape::dot(q[i], keys[j]));
      terms.push_back(tape::logsumexp(logits) - logits.front());
    }
    per_sample.push_back(tape::scale(tape::sum(terms), 1.0 / static_cast<double>(subsets.size())));
  }
  return tape::scale(tape::sum(per_sample), 1.0 / static_cast<double>(n));
}

std::vector<tape::Var> tape_forward(const std::vector<VarMatrix>& layers, const Vector& x) {
  std::vector<tape::Var> h;
  tape::Tape* t = layers.front().front().front().tape;
  for (Index j = 0; j < x.size(); ++j) h.push_back(t->constant(x(j)));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::vector<tape::Var> next;
    for (const auto& row : layers[l]) {
      const tape::Var pre = tape::dot(row, h);
      next.push_back(l + 1 == layers.size() ? pre : tape::relu(pre));
    }
    h = std::move(next);
  }
  return h;
}

double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

Dataset small_dataset(std::uint64_t seed, std::size_t n, std::size_t b) {
  Rng rng(seed);
  return generate_separated(rng, n, b, 0.5);
}

Params small_params(std::uint64_t seed, const Shape& s) {
  Rng rng(seed);
  return init_params(rng, s);
}

}  // namespace

TEST(SampleLoss, ZeroQueryGivesLogOnePlusK) {
  Matrix q = random_outputs(1, 5, 3);
  q.row(2).setZero();
  const EncodedBatch batch = batch_from_outputs(q, random_outputs(2, 5, 3));
  EXPECT_NEAR(sample_loss(batch, 2, {0, 1, 4}), std::log(4.0), 1e-15);
}

TEST(SampleLoss, EqualKeysGiveLogOnePlusK) {
  Matrix keys(4, 3);
  for (Index r = 0; r < 4; ++r) keys.row(r) << 0.3, -1.2, 2.0;
  const EncodedBatch batch = batch_from_outputs(random_outputs(3, 4, 3), keys);
  EXPECT_NEAR(sample_loss(batch, 1, {0, 3}), std::log(3.0), 1e-15);
}

TEST(SampleLoss, TwoSamplesMatchDirectSoftmax) {
  Matrix q(2, 2), k(2, 2);
  q << 0.5, -1.0, 2.0, 0.25;
  k << 1.0, 0.5, -0.5, 1.5;
  const EncodedBatch batch = batch_from_outputs(q, k);
  // q_0 . k_0 = 0, q_0 . k_1 = -1.75
  const double direct = -std::log(std::exp(0.0) / (std::exp(0.0) + std::exp(-1.75)));
  EXPECT_NEAR(sample_loss(batch, 0, {1}), direct, 1e-15);
}

TEST(TotalLossExact, FullNegativeSetIsAverageOfSampleLosses) {
  const EncodedBatch batch = batch_from_outputs(random_outputs(4, 5, 3), random_outputs(5, 5, 3));
  double expected = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<std::size_t> rest;
    for (std::size_t j = 0; j < 5; ++j) {
      if (j != i) rest.push_back(j);
    }
    expected += sample_loss(batch, i, rest) / 5.0;
  }
  EXPECT_NEAR(total_loss_exact(batch, 4), expected, 1e-15);
}

TEST(TotalLossExact, ZeroQueriesGiveLogOnePlusK) {
  const EncodedBatch batch = batch_from_outputs(Matrix::Zero(6, 3), random_outputs(6, 6, 3));
  EXPECT_NEAR(total_loss_exact(batch, 2), std::log(3.0), 1e-15);
}

TEST(TotalLossExact, MatchesEnumerationOracle) {
  const Matrix q = random_outputs(7, 6, 4), k = random_outputs(8, 6, 4);
  const EncodedBatch batch = batch_from_outputs(q, k);
  EXPECT_NEAR(total_loss_exact(batch, 2), oracle::total_loss_by_enumeration(q, k, 2), 1e-14);
}

TEST(TotalLossExact, CapAndArgumentErrors) {
  const EncodedBatch batch = batch_from_outputs(random_outputs(7, 6, 4), random_outputs(8, 6, 4));
  EXPECT_THROW(total_loss_exact(batch, 2, 5), EnumerationError);
  EXPECT_THROW(total_loss_exact(batch, 0), InvalidArgument);
  EXPECT_THROW(total_loss_exact(batch, 6), InvalidArgument);
  EXPECT_THROW(total_loss_exact(batch_from_outputs(random_outputs(1, 6, 4), random_outputs(1, 5, 4)), 2),
               ShapeError);
}

TEST(TotalLossMc, FullNegativeSetHasZeroVariance) {
  const EncodedBatch batch = batch_from_outputs(random_outputs(9, 5, 3), random_outputs(10, 5, 3));
  Rng rng(1);
  const MonteCarloEstimate est = total_loss_mc(batch, 4, rng, 50);
  EXPECT_NEAR(est.estimate, total_loss_exact(batch, 4), 1e-14);
  EXPECT_LT(est.standard_error, 1e-14);
}

TEST(TotalLossMc, WithinThreeStandardErrors) {
  const EncodedBatch batch = batch_from_outputs(random_outputs(11, 10, 4), random_outputs(12, 10, 4));
  Rng rng(2);
  const MonteCarloEstimate est = total_loss_mc(batch, 3, rng, 10000);
  EXPECT_GT(est.standard_error, 0.0);
  EXPECT_LE(std::abs(est.estimate - total_loss_exact(batch, 3)), 3.0 * est.standard_error);
}

TEST(TotalLossMc, SameRngSameEstimate) {
  const EncodedBatch batch = batch_from_outputs(random_outputs(11, 10, 4), random_outputs(12, 10, 4));
  Rng a(5), b(5);
  const MonteCarloEstimate x = total_loss_mc(batch, 3, a, 500), y = total_loss_mc(batch, 3, b, 500);
  EXPECT_EQ(x.estimate, y.estimate);
  EXPECT_EQ(x.standard_error, y.standard_error);
}

TEST(Losstilde, EqualKeysGiveZero) {
  Matrix keys(5, 3);
  for (Index r = 0; r < 5; ++r) keys.row(r) << 1.0, 2.0, -0.5;
  const EncodedBatch batch = batch_from_outputs(random_outputs(13, 5, 3), keys);
  for (const Vector& v : losstilde(batch, 2)) EXPECT_EQ(v.norm(), 0.0);
}

TEST(LosshatPair, ZeroQueryGivesZero) {
  Matrix q = random_outputs(14, 5, 3);
  q.row(1).setZero();
  const EncodedBatch batch = batch_from_outputs(q, random_outputs(15, 5, 3));
  EXPECT_EQ(losshat_pair(batch, 1, 3, 2).norm(), 0.0);
}

TEST(LosshatPair, FullNegativeSetIsOneSoftmaxWeight) {
  const Matrix q = random_outputs(16, 4, 3), k = random_outputs(17, 4, 3);
  const EncodedBatch batch = batch_from_outputs(q, k);
  // Sample 0 sees negatives {1, 2, 3}; the weight of key 2 times q_0.
  double denom = 0.0;
  for (Index j = 0; j < 4; ++j) denom += std::exp(q.row(0).dot(k.row(j)));
  const double w = std::exp(q.row(0).dot(k.row(2))) / denom;
  const Vector expected = w * q.row(0).transpose();
  EXPECT_LT((losshat_pair(batch, 0, 2, 3) - expected).norm(), 1e-15);
}

TEST(LosshatPair, MatchesContainmentFilteredEnumeration) {
  const Matrix q = random_outputs(18, 5, 3), k = random_outputs(19, 5, 3);
  const EncodedBatch batch = batch_from_outputs(q, k);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      if (i == j) continue;
      const Vector o = oracle::losshat_pair_by_enumeration(q, k, i, j, 2);
      EXPECT_LT((losshat_pair(batch, i, j, 2) - o).norm(), 1e-14);
    }
  }
}

TEST(Losshat, TwoSamplesAreOppositeInClosedForm) {
  const Matrix q = random_outputs(20, 2, 3), k = random_outputs(21, 2, 3);
  const EncodedBatch batch = batch_from_outputs(q, k);
  const auto hat = losshat_all(batch, 1);
  const auto sigmoid = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  const double z0 = q.row(0).dot(k.row(1) - k.row(0));
  const double z1 = q.row(1).dot(k.row(0) - k.row(1));
  const Vector closed = -sigmoid(z0) * q.row(0).transpose() + sigmoid(z1) * q.row(1).transpose();
  EXPECT_LT((hat[0] - closed).norm(), 1e-15);
  EXPECT_LT((hat[0] + hat[1]).norm(), 1e-15);
}

TEST(LossVectors, MatchReverseModeDerivatives) {
  for (const auto& [n, k] : {std::pair<std::size_t, std::size_t>{6, 2}, {5, 4}, {4, 1}, {7, 3}}) {
    const Matrix q = random_outputs(30 + n, n, 4, 2.0), keys = random_outputs(40 + n, n, 4, 2.0);
    const EncodedBatch batch = batch_from_outputs(q, keys);
    const LossVectors lv = loss_vectors(batch, expectation_exact(batch, k));

    tape::Tape t;
    const VarMatrix qv = to_vars(t, q), kv = to_vars(t, keys);
    const tape::Var loss = tape_total_loss(qv, kv, k);
    EXPECT_NEAR(loss.value, total_loss_exact(batch, k), 1e-13);
    const auto adj = t.gradient(loss);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < 4; ++c) {
        const double dq = static_cast<double>(n) * adj[qv[i][c].id];
        const double dk = static_cast<double>(n) * adj[kv[i][c].id];
        EXPECT_NEAR(lv.losstilde[i](static_cast<Index>(c)), dq, 1e-10 * std::max(1.0, std::abs(dq)));
        EXPECT_NEAR(lv.losshat[i](static_cast<Index>(c)), dk, 1e-10 * std::max(1.0, std::abs(dk)));
      }
    }
  }
}

TEST(LossVectors, LosshatSumsToZero) {
  const EncodedBatch batch = batch_from_outputs(random_outputs(50, 8, 5), random_outputs(51, 8, 5));
  const LossVectors lv = loss_vectors(batch, expectation_exact(batch, 3));
  Vector total = Vector::Zero(5);
  double mass = 0.0;
  for (const Vector& v : lv.losshat) {
    total += v;
    mass += v.norm();
  }
  EXPECT_LT(total.norm(), 1e-14 * mass);
  EXPECT_NEAR(lv.norm(), std::hypot(lv.losstilde_norm(), lv.losshat_norm()), 1e-14);
}

TEST(LossVectors, ExpectationPathsAgree) {
  const EncodedBatch batch = batch_from_outputs(random_outputs(52, 6, 3), random_outputs(53, 6, 3));
  const LossVectors lv = loss_vectors(batch, expectation_exact(batch, 2));
  const auto tilde = losstilde(batch, 2);
  const auto hat = losshat_all(batch, 2);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_LT((lv.losstilde[i] - tilde[i]).norm(), 1e-14);
    EXPECT_LT((lv.losshat[i] - hat[i]).norm(), 1e-14);
  }
}

TEST(GradParams, MatchReverseModeThroughBothNetworks) {
  const Shape s{2, 6, 3, 4};
  const std::size_t n = 5, k = 2;
  const Dataset data = small_dataset(3, n, s.b);
  const Params query = small_params(61, s), key = small_params(62, s);
  HyperParams hp;
  hp.k = k;
  hp.mode = ExpectationMode::exact;
  const GradientResult g = grad_params(query, key, data, hp);

  tape::Tape t;
  std::vector<VarMatrix> wq, wk;
  for (std::size_t l = 0; l <= s.L; ++l) {
    wq.push_back(to_vars(t, query.layers[l]));
    wk.push_back(to_vars(t, key.layers[l]));
  }
  VarMatrix qv, kv;
  for (const Vector& x : data.points) {
    qv.push_back(tape_forward(wq, x));
    kv.push_back(tape_forward(wk, x));
  }
  const tape::Var loss = tape_total_loss(qv, kv, k);
  EXPECT_NEAR(loss.value, g.loss, 1e-13);
  const auto adj = t.gradient(loss);

  for (std::size_t l = 0; l <= s.L; ++l) {
    Matrix tq(query.layers[l].rows(), query.layers[l].cols()), tk(tq.rows(), tq.cols());
    for (Index r = 0; r < tq.rows(); ++r) {
      for (Index c = 0; c < tq.cols(); ++c) {
        tq(r, c) = adj[wq[l][static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].id];
        tk(r, c) = adj[wk[l][static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].id];
      }
    }
    EXPECT_LT(max_abs(g.grad_query.layers[l] - tq), 1e-10 * std::max(1.0, max_abs(tq))) << "layer " << l;
    EXPECT_LT(max_abs(g.grad_key.layers[l] - tk), 1e-10 * std::max(1.0, max_abs(tk))) << "layer " << l;
  }
}

TEST(GradParams, ZeroLossVectorsGiveZeroGradients) {
  const Shape s{2, 6, 3, 4};
  const Dataset data = small_dataset(3, 5, s.b);
  HyperParams hp;
  hp.k = 2;
  const GradientResult g = grad_params(Params::zeros(s), Params::zeros(s), data, hp);
  EXPECT_EQ(g.grad_query.frobenius_norm(), 0.0);
  EXPECT_EQ(g.grad_key.frobenius_norm(), 0.0);
  EXPECT_EQ(g.loss_vectors.norm(), 0.0);
  EXPECT_NEAR(g.loss, std::log(3.0), 1e-15);
}

TEST(GradParams, MonteCarloModeIsSeeded) {
  const Shape s{2, 8, 3, 4};
  const Dataset data = small_dataset(4, 6, s.b);
  const Params query = small_params(1, s), key = small_params(2, s);
  HyperParams hp;
  hp.k = 2;
  hp.mode = ExpectationMode::monte_carlo;
  hp.mc_samples = 200;
  Rng a(9), b(9);
  const GradientResult x = grad_params(query, key, data, hp, &a);
  const GradientResult y = grad_params(query, key, data, hp, &b);
  EXPECT_EQ(x.loss, y.loss);
  EXPECT_EQ(x.grad_query.layers[0], y.grad_query.layers[0]);
  EXPECT_EQ(x.mode, ExpectationMode::monte_carlo);
  EXPECT_THROW(grad_params(query, key, data, hp), InvalidArgument);
}

TEST(HyperParams, ValidationMessages) {
  HyperParams hp;
  hp.k = 8;
  try {
    hp.validate(8);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("k must be ≤ n−1"), std::string::npos);
  }
  hp.k = 2;
  hp.T = 0;
  try {
    hp.validate(8);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("T must be ≥ 1"), std::string::npos);
  }
}

TEST(ResolveMode, AutomaticFollowsEnumerationCap) {
  HyperParams hp;
  hp.k = 3;
  EXPECT_EQ(resolve_mode(10, hp), ExpectationMode::exact);
  hp.enumeration_cap = 10;
  EXPECT_EQ(resolve_mode(10, hp), ExpectationMode::monte_carlo);
  hp.mode = ExpectationMode::exact;
  EXPECT_EQ(resolve_mode(10, hp), ExpectationMode::exact);
}

TEST(ExpectationMode, StringRoundTrip) {
  for (auto m : {ExpectationMode::automatic, ExpectationMode::exact, ExpectationMode::monte_carlo}) {
    EXPECT_EQ(expectation_mode_from_string(to_string(m)), m);
  }
  EXPECT_THROW(expectation_mode_from_string("sometimes"), ParseError);
}
