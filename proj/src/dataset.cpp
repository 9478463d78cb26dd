#include "contrastlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "contrastlab/error.hpp"
#include "text_format.hpp"

namespace clab {

namespace {

Vector random_unit_vector(Rng& rng, std::size_t b) {
  Vector v = gaussian_vector(rng, static_cast<Index>(b), 1.0);
  double norm = v.norm();
  while (norm == 0.0) {
    v = gaussian_vector(rng, static_cast<Index>(b), 1.0);
    norm = v.norm();
  }
  return v / norm;
}

}  // namespace

double min_pairwise_distance(const std::vector<Vector>& points) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = i + 1; j < points.size(); ++j) {
      best = std::min(best, (points[i] - points[j]).norm());
    }
  }
  return best;
}

Dataset generate_separated(Rng& rng, std::size_t n, std::size_t b, double delta_min,
                           std::optional<std::size_t> max_attempts,
                           std::size_t* attempts_used) {
  if (n < 2 || b < 2) throw InvalidArgument("generate_separated: need n >= 2 and b >= 2");
  if (!(delta_min > 0.0) || !(delta_min < 2.0)) {
    throw InvalidArgument("generate_separated: delta_min must lie in (0, 2)");
  }
  const std::size_t budget = max_attempts.value_or(10 * n * n);

  for (std::size_t attempt = 1; attempt <= budget; ++attempt) {
    std::vector<Vector> points;
    points.reserve(n);
    bool conflict = false;
    while (points.size() < n && !conflict) {
      Vector candidate = random_unit_vector(rng, b);
      for (const Vector& p : points) {
        if ((p - candidate).norm() < delta_min) {
          conflict = true;
          break;
        }
      }
      if (!conflict) points.push_back(std::move(candidate));
    }
    if (!conflict) {
      if (attempts_used) *attempts_used = attempt;
      Dataset data;
      data.delta = min_pairwise_distance(points);
      data.points = std::move(points);
      return data;
    }
  }
  if (attempts_used) *attempts_used = budget;
  throw GenerationError("generate_separated: no " + std::to_string(n) +
                            "-point set with separation " + detail::format_double(delta_min) +
                            " found in " + std::to_string(budget) + " attempts",
                        budget);
}

Dataset simplex_dataset(std::size_t n, std::size_t b) {
  if (n < 2 || n > b) throw InvalidArgument("simplex_dataset: need 2 <= n <= b");
  const double centroid = 1.0 / static_cast<double>(n);
  Dataset data;
  for (std::size_t i = 0; i < n; ++i) {
    Vector v = Vector::Zero(static_cast<Index>(b));
    for (std::size_t j = 0; j < n; ++j) {
      v(static_cast<Index>(j)) = (i == j ? 1.0 : 0.0) - centroid;
    }
    data.points.push_back(v / v.norm());
  }
  data.delta = min_pairwise_distance(data.points);
  return data;
}

DatasetReport validate_dataset(const Dataset& data) {
  DatasetReport report;
  for (const Vector& p : data.points) {
    report.max_norm_deviation = std::max(report.max_norm_deviation, std::abs(p.norm() - 1.0));
  }
  report.min_distance = data.n() >= 2 ? min_pairwise_distance(data.points) : 0.0;
  report.norms_ok = report.max_norm_deviation <= kUnitNormTolerance;
  report.separation_ok = data.n() >= 2 && data.delta > 0.0 && report.min_distance >= data.delta;
  return report;
}

std::string dataset_to_json(const Dataset& data) {
  std::string out = "{\"n\":" + std::to_string(data.n()) + ",\"b\":" + std::to_string(data.b()) +
                    ",\"delta\":" + detail::format_double(data.delta) + ",\"points\":[";
  for (std::size_t i = 0; i < data.points.size(); ++i) {
    if (i) out += ',';
    out += '[';
    const Vector& p = data.points[i];
    for (Index j = 0; j < p.size(); ++j) {
      if (j) out += ',';
      out += detail::format_double(p(j));
    }
    out += ']';
  }
  out += "]}";
  return out;
}

Dataset dataset_from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset: ") + e.what());
  }
  // Run artifacts wrap the dataset together with the config that produced it.
  if (doc.is_object() && doc.contains("dataset")) doc = doc["dataset"];
  try {
    const auto n = doc.at("n").get<std::size_t>();
    const auto b = doc.at("b").get<std::size_t>();
    Dataset data;
    data.delta = doc.at("delta").get<double>();
    for (const auto& row : doc.at("points")) {
      auto values = row.get<std::vector<double>>();
      if (values.size() != b) throw ParseError("dataset: point dimension differs from b");
      data.points.push_back(Eigen::Map<const Vector>(values.data(), static_cast<Index>(b)));
    }
    if (data.points.size() != n) throw ParseError("dataset: point count differs from n");
    return data;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset: ") + e.what());
  }
}

}  // namespace clab
