#include "contrastlab/oracle.hpp"

#include <algorithm>
#include <cmath>

#include "contrastlab/error.hpp"

namespace clab::oracle {

namespace {

void fd_network(const LossFunction& loss, Params& target, const Params& query, const Params& key,
                bool is_query, double h, Params& grad) {
  const char* name = is_query ? "query" : "key";
  for (std::size_t l = 0; l < target.layers.size(); ++l) {
    Matrix& w = target.layers[l];
    for (Index r = 0; r < w.rows(); ++r) {
      for (Index c = 0; c < w.cols(); ++c) {
        const double original = w(r, c);
        w(r, c) = original + h;
        const double plus = is_query ? loss(target, key) : loss(query, target);
        w(r, c) = original - h;
        const double minus = is_query ? loss(target, key) : loss(query, target);
        w(r, c) = original;
        if (!std::isfinite(plus) || !std::isfinite(minus)) {
          throw EvaluationError(std::string("fd_gradient: non-finite loss at ") + name +
                                " layer " + std::to_string(l) + " (" + std::to_string(r) + "," +
                                std::to_string(c) + ")");
        }
        grad.layers[l](r, c) = (plus - minus) / (2.0 * h);
      }
    }
  }
}

void subsets_from(std::size_t start, std::size_t n, std::size_t k, std::size_t exclude,
                  std::vector<std::size_t>& current,
                  std::vector<std::vector<std::size_t>>& out) {
  if (current.size() == k) {
    out.push_back(current);
    return;
  }
  for (std::size_t v = start; v < n; ++v) {
    if (v == exclude) continue;
    current.push_back(v);
    subsets_from(v + 1, n, k, exclude, current, out);
    current.pop_back();
  }
}

// Softmax over {own key} U subset with raw logits; returns (-log p_own, p_j).
std::pair<double, double> softmax_terms(const Matrix& queries, const Matrix& keys, std::size_t i,
                                        const std::vector<std::size_t>& subset, std::size_t j) {
  const auto row = static_cast<Index>(i);
  const double own = queries.row(row).dot(keys.row(row));
  std::vector<double> logits{own};
  for (std::size_t s : subset) logits.push_back(queries.row(row).dot(keys.row(static_cast<Index>(s))));
  const double top = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double a : logits) denom += std::exp(a - top);
  double p_j = 0.0;
  for (std::size_t a = 0; a < subset.size(); ++a) {
    if (subset[a] == j) p_j = std::exp(logits[a + 1] - top) / denom;
  }
  const double neg_log_own = -((own - top) - std::log(denom));
  return {neg_log_own, p_j};
}

}  // namespace

ParamsPair fd_gradient(const LossFunction& loss, const Params& query, const Params& key, double h) {
  if (!(h > 0.0)) throw InvalidArgument("fd_gradient: h must be > 0");
  ParamsPair out{Params::zeros(query.shape), Params::zeros(key.shape)};
  Params query_copy = query;
  fd_network(loss, query_copy, query, key, true, h, out.query);
  Params key_copy = key;
  fd_network(loss, key_copy, query, key, false, h, out.key);
  return out;
}

std::vector<std::vector<std::size_t>> enumerate_subsets(std::size_t n, std::size_t k,
                                                        std::size_t exclude) {
  if (n < 2 || k < 1 || k > n - 1) {
    throw InvalidArgument("enumerate_subsets: k must lie in [1, n-1]");
  }
  if (exclude >= n) throw IndexError("enumerate_subsets: excluded index out of range");
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> current;
  subsets_from(0, n, k, exclude, current, out);
  return out;
}

double total_loss_by_enumeration(const Matrix& queries, const Matrix& keys, std::size_t k) {
  const auto n = static_cast<std::size_t>(queries.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto subsets = enumerate_subsets(n, k, i);
    double sum = 0.0;
    for (const auto& subset : subsets) sum += softmax_terms(queries, keys, i, subset, n).first;
    total += sum / static_cast<double>(subsets.size());
  }
  return total / static_cast<double>(n);
}

Vector losshat_pair_by_enumeration(const Matrix& queries, const Matrix& keys, std::size_t i,
                                   std::size_t j, std::size_t k) {
  const auto n = static_cast<std::size_t>(queries.rows());
  const auto subsets = enumerate_subsets(n, k, i);
  double coefficient = 0.0;
  for (const auto& subset : subsets) {
    if (std::find(subset.begin(), subset.end(), j) == subset.end()) continue;
    coefficient += softmax_terms(queries, keys, i, subset, j).second;
  }
  coefficient /= static_cast<double>(subsets.size());
  return coefficient * queries.row(static_cast<Index>(i)).transpose();
}

Vector fd_row_gradient(const std::function<double(const Matrix&)>& f, const Matrix& at, Index row,
                       double h) {
  Matrix probe = at;
  Vector grad(at.cols());
  for (Index c = 0; c < at.cols(); ++c) {
    const double original = probe(row, c);
    probe(row, c) = original + h;
    const double plus = f(probe);
    probe(row, c) = original - h;
    const double minus = f(probe);
    probe(row, c) = original;
    grad(c) = (plus - minus) / (2.0 * h);
  }
  return grad;
}

std::vector<std::vector<std::uint8_t>> kink_mask_single(const Params& params, const Dataset& data,
                                                        double h) {
  const std::size_t L = params.shape.L;
  std::vector<ForwardTrace> traces;
  for (const Vector& x : data.points) traces.push_back(forward_trace(params, x));

  std::vector<std::vector<std::uint8_t>> flags;
  Params probe = params;
  for (std::size_t l = 0; l <= L; ++l) {
    Matrix& w = probe.layers[l];
    flags.emplace_back(static_cast<std::size_t>(w.size()), 0);
    if (l == L) continue;  // the output layer feeds no activation
    for (Index r = 0; r < w.rows(); ++r) {
      for (Index c = 0; c < w.cols(); ++c) {
        const double original = w(r, c);
        bool flipped = false;
        for (double step : {h, -h}) {
          w(r, c) = original + step;
          for (std::size_t i = 0; i < traces.size() && !flipped; ++i) {
            Vector state = layer_input(traces[i], l);
            for (std::size_t j = l; j < L && !flipped; ++j) {
              Vector pre = probe.layers[j] * state;
              const BitMask& base = traces[i].masks[j];
              for (Index u = 0; u < pre.size(); ++u) {
                const bool active = pre(u) >= 0.0;
                if (active != base.test(static_cast<std::size_t>(u))) {
                  flipped = true;
                  break;
                }
                if (!active) pre(u) = 0.0;
              }
              state = std::move(pre);
            }
          }
          if (flipped) break;
        }
        w(r, c) = original;
        flags[l][static_cast<std::size_t>(r * w.cols() + c)] = flipped ? 1 : 0;
      }
    }
  }
  return flags;
}

KinkMask kink_mask(const Params& query, const Params& key, const Dataset& data, double h) {
  if (!(h >= 0.0)) throw InvalidArgument("kink_mask: h must be >= 0");
  return {kink_mask_single(query, data, h), kink_mask_single(key, data, h)};
}

std::size_t KinkMask::marked() const {
  std::size_t total = 0;
  for (const auto* net : {&query, &key}) {
    for (const auto& layer : *net) total += static_cast<std::size_t>(std::count(layer.begin(), layer.end(), 1));
  }
  return total;
}

std::size_t KinkMask::total() const {
  std::size_t total = 0;
  for (const auto* net : {&query, &key}) {
    for (const auto& layer : *net) total += layer.size();
  }
  return total;
}

double KinkMask::fraction() const {
  const std::size_t all = total();
  return all == 0 ? 0.0 : static_cast<double>(marked()) / static_cast<double>(all);
}

GradientComparison compare_gradients(const ParamsPair& analytic, const ParamsPair& numeric,
                                     const KinkMask& mask, double floor_fraction) {
  GradientComparison out;
  const struct {
    const Params* analytic;
    const Params* numeric;
    const std::vector<std::vector<std::uint8_t>>* flags;
    const char* name;
  } nets[] = {{&analytic.query, &numeric.query, &mask.query, "query"},
              {&analytic.key, &numeric.key, &mask.key, "key"}};
  for (const auto& net : nets) {
    require_same_shape(*net.analytic, *net.numeric, "compare_gradients");
    double scale = 0.0;
    for (const Matrix& w : net.analytic->layers) scale = std::max(scale, w.cwiseAbs().maxCoeff());
    const double floor = floor_fraction * scale;
    for (std::size_t l = 0; l < net.analytic->layers.size(); ++l) {
      const Matrix& a = net.analytic->layers[l];
      const Matrix& f = net.numeric->layers[l];
      for (Index idx = 0; idx < a.size(); ++idx) {
        if (!net.flags->empty() && (*net.flags)[l][static_cast<std::size_t>(idx)]) {
          ++out.masked;
          continue;
        }
        const double av = a.data()[idx];
        const double fv = f.data()[idx];
        const double denom = std::max({std::abs(av), std::abs(fv), floor});
        const double err = denom == 0.0 ? 0.0 : std::abs(av - fv) / denom;
        ++out.compared;
        if (err > out.max_relative_error) {
          out.max_relative_error = err;
          out.worst_coordinate = std::string(net.name) + " layer " + std::to_string(l) + " #" +
                                 std::to_string(idx);
        }
      }
    }
  }
  return out;
}

}  // namespace clab::oracle
