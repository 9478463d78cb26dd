#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "contrastlab/encoder.hpp"
#include "contrastlab/error.hpp"

using namespace clab;

namespace {

Params random_params(std::uint64_t seed, Shape shape) {
  Rng rng(seed);
  return init_params(rng, shape);
}

Vector unit_input(std::uint64_t seed, std::size_t b) {
  Rng rng(seed);
  Vector x = gaussian_vector(rng, static_cast<Index>(b), 1.0);
  return x / x.norm();
}

}  // namespace

TEST(Shape, LayerDimensions) {
  const Shape s{3, 10, 4, 6};
  EXPECT_EQ(s.rows(0), 10);
  EXPECT_EQ(s.cols(0), 6);
  EXPECT_EQ(s.rows(1), 10);
  EXPECT_EQ(s.cols(2), 10);
  EXPECT_EQ(s.rows(3), 4);
  EXPECT_EQ(s.parameter_count(), 10u * 6 + 2 * 100 + 4 * 10);
  EXPECT_THROW((Shape{0, 1, 1, 1}.validate()), ShapeError);
}

TEST(InitParams, SameRngSameParams) {
  const Shape s{2, 16, 4, 5};
  const Params a = random_params(3, s), b = random_params(3, s);
  for (std::size_t l = 0; l <= s.L; ++l) EXPECT_EQ(a.layers[l], b.layers[l]);
  EXPECT_EQ(a.provenance, b.provenance);
}

TEST(InitParams, LayerVariances) {
  const Shape s{2, 400, 50, 300};
  const Params p = random_params(8, s);
  for (std::size_t l = 0; l < s.L; ++l) {
    const double var = p.layers[l].squaredNorm() / static_cast<double>(p.layers[l].size());
    EXPECT_NEAR(var, 2.0 / 400.0, 2e-4);
  }
  const double out_var = p.layers[s.L].squaredNorm() / static_cast<double>(p.layers[s.L].size());
  EXPECT_NEAR(out_var, 1.0 / 50.0, 1e-3);
}

TEST(Forward, ZeroNetworkIsZero) {
  const Params p = Params::zeros(Shape{3, 8, 2, 4});
  const ForwardTrace t = forward_trace(p, unit_input(1, 4));
  for (const Vector& h : t.hidden) EXPECT_EQ(h.norm(), 0.0);
  EXPECT_EQ(t.output.norm(), 0.0);
  // Ties at zero count as active.
  for (const BitMask& m : t.masks) EXPECT_EQ(m.count(), 8u);
}

TEST(Forward, HandEvaluation) {
  Params p = Params::zeros(Shape{1, 2, 1, 2});
  p.layers[0] << 1, 0, -1, 0;
  p.layers[1] << 1, 1;
  Vector x(2);
  x << 1, 0;
  const ForwardTrace t = forward_trace(p, x);
  EXPECT_EQ(t.hidden[0](0), 1.0);
  EXPECT_EQ(t.hidden[0](1), 0.0);
  EXPECT_EQ(t.output(0), 1.0);
  EXPECT_TRUE(t.masks[0].test(0));
  EXPECT_FALSE(t.masks[0].test(1));
}

TEST(Forward, NegatedFirstLayerComplementsMask) {
  const Params p = random_params(5, Shape{2, 64, 3, 6});
  Params neg = p;
  neg.layers[0] = -p.layers[0];
  const Vector x = unit_input(2, 6);
  const ForwardTrace a = forward_trace(p, x), b = forward_trace(neg, x);
  const Vector pre = p.layers[0] * x;
  for (Index k = 0; k < 64; ++k) {
    if (pre(k) == 0.0) continue;
    EXPECT_NE(a.masks[0].test(static_cast<std::size_t>(k)), b.masks[0].test(static_cast<std::size_t>(k)));
  }
}

TEST(Forward, RejectsWrongInputDimension) {
  const Params p = random_params(5, Shape{2, 8, 3, 6});
  EXPECT_THROW(forward(p, Vector::Zero(5)), ShapeError);
}

TEST(BitMask, CountsAndDifferences) {
  BitMask a(130), b(130);
  a.set(0);
  a.set(64);
  a.set(129);
  b.set(64);
  EXPECT_EQ(a.count(), 3u);
  EXPECT_EQ(a.count_differences(b), 2u);
  EXPECT_THROW(a.count_differences(BitMask(10)), ShapeError);
}

TEST(BackpropMatrix, LastLayerIsOutputWeights) {
  const Params p = random_params(6, Shape{3, 12, 4, 5});
  const ForwardTrace t = forward_trace(p, unit_input(3, 5));
  EXPECT_EQ(backprop_matrix(p, t, 3), p.layers[3]);
  EXPECT_THROW(backprop_matrix(p, t, 4), IndexError);
}

TEST(BackpropMatrix, AllActiveMasksGivePlainProduct) {
  Params p = random_params(7, Shape{3, 6, 2, 3});
  ForwardTrace t = forward_trace(p, unit_input(4, 3));
  for (BitMask& m : t.masks) {
    m = BitMask(6);
    for (std::size_t k = 0; k < 6; ++k) m.set(k);
  }
  const Matrix expected = p.layers[3] * p.layers[2] * p.layers[1];
  EXPECT_LT((backprop_matrix(p, t, 1) - expected).norm(), 1e-14);
}

TEST(BackpropMatrix, MapsLayerSignalToOutput) {
  // With the masks of the trace held fixed the output equals b_l h_{l-1}.
  const Params p = random_params(8, Shape{3, 32, 4, 6});
  const ForwardTrace t = forward_trace(p, unit_input(5, 6));
  for (std::size_t l = 0; l <= 3; ++l) {
    const Vector via = backprop_matrix(p, t, l) * layer_input(t, l);
    EXPECT_LT((via - t.output).norm(), 1e-12);
  }
}

TEST(ApplyPerturbation, ZeroScaleIsIdentity) {
  const Params p = random_params(1, Shape{2, 8, 3, 4});
  const Params q = random_params(2, Shape{2, 8, 3, 4});
  const Perturbed out = apply_perturbation(p, q, 0.0);
  for (std::size_t l = 0; l <= 2; ++l) EXPECT_EQ(out.params.layers[l], p.layers[l]);
  EXPECT_EQ(out.frobenius_norm, 0.0);
  for (double s : out.layer_spectral_norms) EXPECT_EQ(s, 0.0);
}

TEST(ApplyPerturbation, SelfCancellation) {
  const Params p = random_params(1, Shape{2, 8, 3, 4});
  const Perturbed out = apply_perturbation(p, p, -1.0);
  EXPECT_EQ(out.params.frobenius_norm(), 0.0);
}

TEST(ApplyPerturbation, NormsAreHomogeneous) {
  const Params p = random_params(1, Shape{2, 8, 3, 4});
  const Params q = random_params(2, Shape{2, 8, 3, 4});
  const Perturbed one = apply_perturbation(p, q, 1.0), two = apply_perturbation(p, q, 2.0);
  EXPECT_NEAR(two.frobenius_norm, 2.0 * one.frobenius_norm, 1e-12);
  for (std::size_t l = 0; l < one.layer_spectral_norms.size(); ++l) {
    EXPECT_NEAR(two.layer_spectral_norms[l], 2.0 * one.layer_spectral_norms[l], 1e-5 * two.layer_spectral_norms[l]);
  }
  EXPECT_THROW(apply_perturbation(p, random_params(2, Shape{2, 9, 3, 4}), 1.0), ShapeError);
}

TEST(SignCorrection, AgreeingSignsGiveZero) {
  const Vector a = unit_input(1, 10);
  EXPECT_EQ(sign_correction(a, a).norm(), 0.0);
}

TEST(SignCorrection, OppositeSignsSolveTheReluIdentity) {
  Vector a(1), b(1);
  a << 1.0;
  b << -1.0;
  EXPECT_EQ(sign_correction(a, b)(0), -0.5);
}

TEST(SignCorrection, ReproducesReluDifferenceOnRandomPairs) {
  Rng rng(9);
  const Vector a = gaussian_vector(rng, 200, 1.0), b = gaussian_vector(rng, 200, 1.0);
  const Vector dpp = sign_correction(a, b);
  for (Index k = 0; k < 200; ++k) {
    const double D = a(k) >= 0.0 ? 1.0 : 0.0;
    EXPECT_NEAR((D + dpp(k)) * (a(k) - b(k)), std::max(a(k), 0.0) - std::max(b(k), 0.0), 1e-14);
  }
}

TEST(ParamsIo, BytesRoundTrip) {
  Params p = random_params(4, Shape{2, 7, 3, 5});
  p.provenance.label = "query";
  const Params back = params_from_bytes(params_to_bytes(p));
  EXPECT_EQ(back.shape, p.shape);
  EXPECT_EQ(back.provenance, p.provenance);
  for (std::size_t l = 0; l <= 2; ++l) EXPECT_EQ(back.layers[l], p.layers[l]);
  EXPECT_EQ(params_to_bytes(back), params_to_bytes(p));
}

TEST(ParamsIo, FileRoundTrip) {
  const Params p = random_params(4, Shape{1, 3, 2, 2});
  const std::string path = (std::filesystem::temp_directory_path() / "clab_params_io.bin").string();
  save_params(p, path);
  EXPECT_EQ(params_to_bytes(load_params(path)), params_to_bytes(p));
  std::remove(path.c_str());
  EXPECT_THROW(load_params(path), IoError);
}

TEST(ParamsIo, CorruptContainersAreRejected) {
  const std::string bytes = params_to_bytes(random_params(4, Shape{1, 3, 2, 2}));
  EXPECT_THROW(params_from_bytes(bytes.substr(0, bytes.size() - 1)), ParseError);
  EXPECT_THROW(params_from_bytes(bytes + "x"), ParseError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(params_from_bytes(bad), ParseError);
}

TEST(ParamsAlgebra, InnerAxpyScaled) {
  const Params a = random_params(1, Shape{2, 5, 2, 3});
  const Params b = random_params(2, Shape{2, 5, 2, 3});
  EXPECT_NEAR(inner(a, a), a.frobenius_norm() * a.frobenius_norm(), 1e-12);
  const Params c = axpy(a, b, 2.0);
  EXPECT_NEAR(inner(c, b), inner(a, b) + 2.0 * inner(b, b), 1e-12);
  EXPECT_NEAR(scaled(a, -3.0).frobenius_norm(), 3.0 * a.frobenius_norm(), 1e-12);
  EXPECT_TRUE(a.all_finite());
}
