#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "contrastlab/core_math.hpp"

namespace clab {

/// n unit-norm points in R^b, pairwise at least `delta` apart.
///
/// `delta` holds the realized minimum pairwise distance, which is what every
/// step-size and bound-ratio formula downstream consumes.
struct Dataset {
  std::vector<Vector> points;
  double delta = 0.0;

  std::size_t n() const noexcept { return points.size(); }
  std::size_t b() const noexcept { return points.empty() ? 0 : static_cast<std::size_t>(points.front().size()); }
};

struct DatasetReport {
  double max_norm_deviation = 0.0;
  double min_distance = 0.0;
  bool norms_ok = false;
  bool separation_ok = false;

  bool pass() const noexcept { return norms_ok && separation_ok; }
};

constexpr double kUnitNormTolerance = 1e-12;

/// Rejection sampler. Points are drawn uniformly on the sphere one at a time;
/// when the newest point lands within delta_min of an earlier one the whole
/// set is redrawn and the attempt counter advances. max_attempts defaults to
/// 10 n^2. Throws GenerationError when the budget runs out.
Dataset generate_separated(Rng& rng, std::size_t n, std::size_t b, double delta_min,
                           std::optional<std::size_t> max_attempts = std::nullopt,
                           std::size_t* attempts_used = nullptr);

/// Vertices of the regular (n-1)-simplex embedded in the first n coordinates
/// of R^b. Requires 2 <= n <= b. All pairwise distances equal sqrt(2n/(n-1)).
Dataset simplex_dataset(std::size_t n, std::size_t b);

DatasetReport validate_dataset(const Dataset& data);

double min_pairwise_distance(const std::vector<Vector>& points);

/// {"n":..,"b":..,"delta":..,"points":[[..],..]} with 17 significant digits.
std::string dataset_to_json(const Dataset& data);
Dataset dataset_from_json(const std::string& text);

}  // namespace clab
