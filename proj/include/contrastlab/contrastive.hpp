#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "contrastlab/core_math.hpp"
#include "contrastlab/dataset.hpp"
#include "contrastlab/encoder.hpp"

namespace clab {

/// Query and key encodings of the whole training set, row i = sample i.
struct EncodedBatch {
  Matrix queries;  // n x d
  Matrix keys;     // n x d
  std::vector<ForwardTrace> query_traces;
  std::vector<ForwardTrace> key_traces;

  std::size_t n() const noexcept { return static_cast<std::size_t>(queries.rows()); }
  std::size_t d() const noexcept { return static_cast<std::size_t>(queries.cols()); }
};

EncodedBatch encode(const Params& query_params, const Params& key_params, const Dataset& data);
/// Batch without traces, for loss-level computations on raw outputs.
EncodedBatch batch_from_outputs(Matrix queries, Matrix keys);

enum class ExpectationMode { automatic, exact, monte_carlo };

const char* to_string(ExpectationMode mode) noexcept;
ExpectationMode expectation_mode_from_string(const std::string& text);

constexpr std::uint64_t kDefaultEnumerationCap = 1'000'000;

struct HyperParams {
  std::size_t k = 1;
  double eta = 0.0;
  double gamma = 0.0;
  std::size_t T = 1;
  double epsilon = 0.5;
  ExpectationMode mode = ExpectationMode::automatic;
  std::size_t mc_samples = 1000;
  std::uint64_t enumeration_cap = kDefaultEnumerationCap;

  void validate(std::size_t n) const;
};

/// d(n L_S)/dq_i and d(n L_S)/dk_i. The factor n matches the external 1/n
/// carried by the parameter-gradient formulas.
struct LossVectors {
  std::vector<Vector> losstilde;
  std::vector<Vector> losshat;

  double losstilde_norm() const;
  double losshat_norm() const;
  double norm() const;
};

/// Softmax weights averaged over the negative-sampling distribution:
/// weight(i, j) = E_{S ~ Neg(i)} [ 1{j in S} exp(q_i.z_ij) / (1 + sum_{s in S} exp(q_i.z_is)) ].
/// Together with the expected per-sample loss this determines the total loss
/// and both loss-vectors.
struct NegativeExpectation {
  Matrix weight;  // n x n, zero diagonal
  double loss = 0.0;
  ExpectationMode mode = ExpectationMode::exact;
  std::uint64_t subsets_per_sample = 0;  // C(n-1, k) or the Monte Carlo draw count
};

/// Throws EnumerationError when C(n-1, k) exceeds cap.
NegativeExpectation expectation_exact(const EncodedBatch& batch, std::size_t k,
                                      std::uint64_t cap = kDefaultEnumerationCap);
/// Independent uniform k-subsets per sample, `samples` draws each.
NegativeExpectation expectation_monte_carlo(const EncodedBatch& batch, std::size_t k, Rng& rng,
                                            std::size_t samples);

/// log(1 + sum_{j in negs} exp(q_i.(k_j - k_i))), equal to the (k+1)-way
/// cross-entropy of classifying q_i as its own key.
double sample_loss(const EncodedBatch& batch, std::size_t i, const std::vector<std::size_t>& negs);

double total_loss_exact(const EncodedBatch& batch, std::size_t k,
                        std::uint64_t cap = kDefaultEnumerationCap);

struct MonteCarloEstimate {
  double estimate = 0.0;
  double standard_error = 0.0;
};

/// Each draw picks an independent uniform subset for every sample and
/// averages the n sample losses; the estimate is the mean over draws.
MonteCarloEstimate total_loss_mc(const EncodedBatch& batch, std::size_t k, Rng& rng,
                                 std::size_t samples);

std::vector<Vector> losstilde(const EncodedBatch& batch, std::size_t k,
                              std::uint64_t cap = kDefaultEnumerationCap);
Vector losshat_pair(const EncodedBatch& batch, std::size_t i, std::size_t j, std::size_t k,
                    std::uint64_t cap = kDefaultEnumerationCap);
std::vector<Vector> losshat_all(const EncodedBatch& batch, std::size_t k,
                                std::uint64_t cap = kDefaultEnumerationCap);

LossVectors loss_vectors(const EncodedBatch& batch, const NegativeExpectation& expectation);

struct GradientResult {
  Params grad_query;  // grad_W L_S
  Params grad_key;    // grad_theta L_S
  LossVectors loss_vectors;
  double loss = 0.0;
  ExpectationMode mode = ExpectationMode::exact;
};

/// exact or monte_carlo, never automatic.
ExpectationMode resolve_mode(std::size_t n, const HyperParams& hp);

/// Chooses exact enumeration or Monte Carlo according to hp.mode; automatic
/// picks exact whenever C(n-1, k) <= hp.enumeration_cap. Monte Carlo needs rng.
NegativeExpectation negative_expectation(const EncodedBatch& batch, const HyperParams& hp,
                                         Rng* rng = nullptr);

/// grad_{W_l} L_S = (1/n) sum_i D_{i,l} (b_{i,l+1}^T losstilde_i) h_{i,l-1}^T,
/// grad_{W_L} L_S = (1/n) sum_i losstilde_i h_{i,L-1}^T, and the same for theta
/// with losshat and the key traces.
GradientResult grad_params(const Params& query_params, const Params& key_params,
                           const Dataset& data, const HyperParams& hp, Rng* rng = nullptr);

/// Back-propagates per-sample output gradients through recorded traces.
Params backprop_gradient(const Params& params, const std::vector<ForwardTrace>& traces,
                         const std::vector<Vector>& output_grads, double scale);

}  // namespace clab
