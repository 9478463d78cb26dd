#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "contrastlab/contrastive.hpp"
#include "contrastlab/dataset.hpp"
#include "contrastlab/encoder.hpp"

// Brute-force references used only to check the production paths. Nothing
// here shares code with the contrastive module beyond the encoder forward pass.
namespace clab::oracle {

using LossFunction = std::function<double(const Params& query, const Params& key)>;

struct ParamsPair {
  Params query;
  Params key;
};

/// Central differences (f(w + h) - f(w - h)) / 2h for every coordinate of both
/// networks. Throws EvaluationError naming the coordinate on a non-finite probe.
ParamsPair fd_gradient(const LossFunction& loss, const Params& query, const Params& key,
                       double h = 1e-4);

/// All k-subsets of {0..n-1} \ {exclude} in lexicographic order (recursive
/// construction, independent of the production combination generator).
std::vector<std::vector<std::size_t>> enumerate_subsets(std::size_t n, std::size_t k,
                                                        std::size_t exclude);

/// (1/n) sum_i mean over subsets of -log softmax(q_i . k)[own key], evaluated
/// with the raw key logits q_i.k_j rather than the difference form.
double total_loss_by_enumeration(const Matrix& queries, const Matrix& keys, std::size_t k);

/// Mean over all negative subsets of sample i that contain j, of the softmax
/// weight of j times q_i, scaled by 1 / C(n-1, k).
Vector losshat_pair_by_enumeration(const Matrix& queries, const Matrix& keys, std::size_t i,
                                   std::size_t j, std::size_t k);

/// Central-difference gradient of f with respect to every entry of row `row`.
Vector fd_row_gradient(const std::function<double(const Matrix&)>& f, const Matrix& at,
                       Index row, double h);

/// Per-coordinate flag: perturbing the weight by +h or -h flips at least one
/// activation bit in some forward trace of that network.
struct KinkMask {
  std::vector<std::vector<std::uint8_t>> query;  // per layer, row-major
  std::vector<std::vector<std::uint8_t>> key;

  std::size_t marked() const;
  std::size_t total() const;
  double fraction() const;
};

KinkMask kink_mask(const Params& query, const Params& key, const Dataset& data, double h);

/// Flags for one network only.
std::vector<std::vector<std::uint8_t>> kink_mask_single(const Params& params, const Dataset& data,
                                                        double h);

struct GradientComparison {
  double max_relative_error = 0.0;
  std::size_t compared = 0;
  std::size_t masked = 0;
  std::string worst_coordinate;
};

/// Relative error |fd - analytic| / max(|analytic|, |fd|, floor) over all
/// unmasked coordinates, with floor = floor_fraction * max|analytic| of the
/// network the coordinate belongs to.
GradientComparison compare_gradients(const ParamsPair& analytic, const ParamsPair& numeric,
                                     const KinkMask& mask, double floor_fraction);

}  // namespace clab::oracle
