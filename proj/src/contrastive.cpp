#include "contrastlab/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "contrastlab/error.hpp"

namespace clab {

namespace {

// Logits q_i . (k_j - k_i) for all j; entry i is unused.
Vector logits_for(const EncodedBatch& batch, std::size_t i) {
  const auto row = static_cast<Index>(i);
  Vector q = batch.queries.row(row).transpose();
  Vector logits = batch.keys * q;
  logits.array() -= batch.keys.row(row).dot(q);
  return logits;
}

// log(1 + sum_{s in subset} exp(logits[s])) and, optionally, the softmax weight
// of every subset member. Subset entries are visited in the given order.
double subset_lse(const Vector& logits, std::span<const std::size_t> subset,
                  std::span<double> weights = {}) {
  double top = 0.0;
  for (std::size_t s : subset) top = std::max(top, logits(static_cast<Index>(s)));
  double sum = std::exp(-top);
  for (std::size_t s : subset) sum += std::exp(logits(static_cast<Index>(s)) - top);
  const double lse = top + std::log(sum);
  for (std::size_t a = 0; a < weights.size(); ++a) {
    weights[a] = std::exp(logits(static_cast<Index>(subset[a])) - lse);
  }
  return lse;
}

std::vector<std::size_t> others(std::size_t n, std::size_t i) {
  std::vector<std::size_t> out;
  out.reserve(n - 1);
  for (std::size_t j = 0; j < n; ++j) {
    if (j != i) out.push_back(j);
  }
  return out;
}

void require_batch(const EncodedBatch& batch, std::size_t k) {
  const std::size_t n = batch.n();
  if (n < 2) throw ShapeError("contrastive: need at least two samples");
  if (batch.keys.rows() != batch.queries.rows() || batch.keys.cols() != batch.queries.cols()) {
    throw ShapeError("contrastive: query and key matrices differ in shape");
  }
  if (k < 1 || k > n - 1) {
    throw InvalidArgument("contrastive: k must lie in [1, n-1] (k=" + std::to_string(k) +
                          ", n=" + std::to_string(n) + ")");
  }
}

}  // namespace

const char* to_string(ExpectationMode mode) noexcept {
  switch (mode) {
    case ExpectationMode::automatic: return "auto";
    case ExpectationMode::exact: return "exact";
    case ExpectationMode::monte_carlo: return "monte-carlo";
  }
  return "auto";
}

ExpectationMode expectation_mode_from_string(const std::string& text) {
  if (text == "auto") return ExpectationMode::automatic;
  if (text == "exact") return ExpectationMode::exact;
  if (text == "monte-carlo") return ExpectationMode::monte_carlo;
  throw ParseError("expectation mode must be one of auto, exact, monte-carlo (got '" + text + "')");
}

void HyperParams::validate(std::size_t n) const {
  if (k < 1 || k + 1 > n) throw InvalidArgument("k must be ≤ n−1 and ≥ 1");
  if (!(eta >= 0.0) || !(gamma >= 0.0)) throw InvalidArgument("step sizes must be >= 0");
  if (T < 1) throw InvalidArgument("T must be ≥ 1");
  if (mode == ExpectationMode::monte_carlo && mc_samples < 1) {
    throw InvalidArgument("mc_samples must be >= 1");
  }
}

EncodedBatch encode(const Params& query_params, const Params& key_params, const Dataset& data) {
  require_same_shape(query_params, key_params, "encode");
  const auto n = static_cast<Index>(data.n());
  const auto d = static_cast<Index>(query_params.shape.d);
  EncodedBatch batch;
  batch.queries.resize(n, d);
  batch.keys.resize(n, d);
  for (Index i = 0; i < n; ++i) {
    batch.query_traces.push_back(forward_trace(query_params, data.points[static_cast<std::size_t>(i)]));
    batch.key_traces.push_back(forward_trace(key_params, data.points[static_cast<std::size_t>(i)]));
    batch.queries.row(i) = batch.query_traces.back().output.transpose();
    batch.keys.row(i) = batch.key_traces.back().output.transpose();
  }
  return batch;
}

EncodedBatch batch_from_outputs(Matrix queries, Matrix keys) {
  EncodedBatch batch;
  batch.queries = std::move(queries);
  batch.keys = std::move(keys);
  if (batch.keys.rows() != batch.queries.rows() || batch.keys.cols() != batch.queries.cols()) {
    throw ShapeError("batch_from_outputs: query and key matrices differ in shape");
  }
  return batch;
}

double sample_loss(const EncodedBatch& batch, std::size_t i, const std::vector<std::size_t>& negs) {
  const std::size_t n = batch.n();
  if (i >= n) throw IndexError("sample_loss: index out of range");
  std::vector<std::size_t> sorted = negs;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t a = 0; a < sorted.size(); ++a) {
    if (sorted[a] >= n) throw IndexError("sample_loss: negative index out of range");
    if (sorted[a] == i) throw IndexError("sample_loss: sample is its own negative");
    if (a > 0 && sorted[a] == sorted[a - 1]) throw IndexError("sample_loss: duplicate negative");
  }
  if (sorted.empty()) throw IndexError("sample_loss: empty negative set");
  return subset_lse(logits_for(batch, i), sorted);
}

NegativeExpectation expectation_exact(const EncodedBatch& batch, std::size_t k, std::uint64_t cap) {
  require_batch(batch, k);
  const std::size_t n = batch.n();
  const std::uint64_t count = binomial(n - 1, k);
  if (count > cap) {
    throw EnumerationError("exact expectation needs C(" + std::to_string(n - 1) + "," +
                           std::to_string(k) + ") subsets per sample, above the cap of " +
                           std::to_string(cap) + "; use monte-carlo mode");
  }

  NegativeExpectation out;
  out.weight = Matrix::Zero(static_cast<Index>(n), static_cast<Index>(n));
  out.mode = ExpectationMode::exact;
  out.subsets_per_sample = count;

  std::vector<std::size_t> position(k);
  std::vector<std::size_t> subset(k);
  std::vector<double> weights(k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vector logits = logits_for(batch, i);
    const std::vector<std::size_t> pool = others(n, i);
    const std::size_t pool_size = pool.size();
    std::iota(position.begin(), position.end(), std::size_t{0});
    double loss_i = 0.0;
    while (true) {
      for (std::size_t a = 0; a < k; ++a) subset[a] = pool[position[a]];
      loss_i += subset_lse(logits, subset, weights);
      for (std::size_t a = 0; a < k; ++a) {
        out.weight(static_cast<Index>(i), static_cast<Index>(subset[a])) += weights[a];
      }
      // Advance to the next combination in lexicographic order.
      std::size_t p = k;
      while (p > 0 && position[p - 1] == pool_size - k + (p - 1)) --p;
      if (p == 0) break;
      ++position[p - 1];
      for (std::size_t a = p; a < k; ++a) position[a] = position[a - 1] + 1;
    }
    total += loss_i / static_cast<double>(count);
  }
  out.weight /= static_cast<double>(count);
  out.loss = total / static_cast<double>(n);
  return out;
}

namespace {

// Uniform k-subset of pool, sorted ascending (partial Fisher-Yates).
void draw_subset(Rng& rng, std::vector<std::size_t>& pool, std::size_t k,
                 std::vector<std::size_t>& subset) {
  for (std::size_t a = 0; a < k; ++a) {
    const std::size_t pick = a + static_cast<std::size_t>(rng.below(pool.size() - a));
    std::swap(pool[a], pool[pick]);
  }
  subset.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(subset.begin(), subset.end());
}

}  // namespace

NegativeExpectation expectation_monte_carlo(const EncodedBatch& batch, std::size_t k, Rng& rng,
                                            std::size_t samples) {
  require_batch(batch, k);
  if (samples < 1) throw InvalidArgument("expectation_monte_carlo: samples must be >= 1");
  const std::size_t n = batch.n();
  NegativeExpectation out;
  out.weight = Matrix::Zero(static_cast<Index>(n), static_cast<Index>(n));
  out.mode = ExpectationMode::monte_carlo;
  out.subsets_per_sample = samples;

  std::vector<std::size_t> subset;
  std::vector<double> weights(k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vector logits = logits_for(batch, i);
    std::vector<std::size_t> pool = others(n, i);
    double loss_i = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      draw_subset(rng, pool, k, subset);
      loss_i += subset_lse(logits, subset, weights);
      for (std::size_t a = 0; a < k; ++a) {
        out.weight(static_cast<Index>(i), static_cast<Index>(subset[a])) += weights[a];
      }
    }
    total += loss_i / static_cast<double>(samples);
  }
  out.weight /= static_cast<double>(samples);
  out.loss = total / static_cast<double>(n);
  return out;
}

double total_loss_exact(const EncodedBatch& batch, std::size_t k, std::uint64_t cap) {
  return expectation_exact(batch, k, cap).loss;
}

MonteCarloEstimate total_loss_mc(const EncodedBatch& batch, std::size_t k, Rng& rng,
                                 std::size_t samples) {
  require_batch(batch, k);
  if (samples < 2) throw InvalidArgument("total_loss_mc: samples must be >= 2");
  const std::size_t n = batch.n();
  std::vector<Vector> logits;
  std::vector<std::vector<std::size_t>> pools;
  for (std::size_t i = 0; i < n; ++i) {
    logits.push_back(logits_for(batch, i));
    pools.push_back(others(n, i));
  }
  std::vector<std::size_t> subset;
  std::vector<double> draws(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    double value = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      draw_subset(rng, pools[i], k, subset);
      value += subset_lse(logits[i], subset);
    }
    draws[s] = value / static_cast<double>(n);
  }
  const double mean = std::accumulate(draws.begin(), draws.end(), 0.0) / static_cast<double>(samples);
  double sq = 0.0;
  for (double v : draws) sq += (v - mean) * (v - mean);
  const double variance = sq / static_cast<double>(samples - 1);
  return {mean, std::sqrt(variance / static_cast<double>(samples))};
}

LossVectors loss_vectors(const EncodedBatch& batch, const NegativeExpectation& expectation) {
  const std::size_t n = batch.n();
  const auto d = static_cast<Index>(batch.d());
  LossVectors out;
  out.losstilde.assign(n, Vector::Zero(d));
  out.losshat.assign(n, Vector::Zero(d));
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Index>(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto jj = static_cast<Index>(j);
      const double w = expectation.weight(ii, jj);
      out.losstilde[i] += w * (batch.keys.row(jj) - batch.keys.row(ii)).transpose();
      // pair (i, j): weight(i, j) q_i enters losshat_j with + and losshat_i with -
      out.losshat[j] += w * batch.queries.row(ii).transpose();
      out.losshat[i] -= w * batch.queries.row(ii).transpose();
    }
  }
  return out;
}

std::vector<Vector> losstilde(const EncodedBatch& batch, std::size_t k, std::uint64_t cap) {
  return loss_vectors(batch, expectation_exact(batch, k, cap)).losstilde;
}

Vector losshat_pair(const EncodedBatch& batch, std::size_t i, std::size_t j, std::size_t k,
                    std::uint64_t cap) {
  if (i >= batch.n() || j >= batch.n()) throw IndexError("losshat_pair: index out of range");
  if (i == j) throw IndexError("losshat_pair: i and j must differ");
  const NegativeExpectation e = expectation_exact(batch, k, cap);
  return e.weight(static_cast<Index>(i), static_cast<Index>(j)) *
         batch.queries.row(static_cast<Index>(i)).transpose();
}

std::vector<Vector> losshat_all(const EncodedBatch& batch, std::size_t k, std::uint64_t cap) {
  return loss_vectors(batch, expectation_exact(batch, k, cap)).losshat;
}

double LossVectors::losstilde_norm() const {
  double sum = 0.0;
  for (const Vector& v : losstilde) sum += v.squaredNorm();
  return std::sqrt(sum);
}

double LossVectors::losshat_norm() const {
  double sum = 0.0;
  for (const Vector& v : losshat) sum += v.squaredNorm();
  return std::sqrt(sum);
}

double LossVectors::norm() const {
  return std::hypot(losstilde_norm(), losshat_norm());
}

ExpectationMode resolve_mode(std::size_t n, const HyperParams& hp) {
  if (hp.mode != ExpectationMode::automatic) return hp.mode;
  return binomial(n - 1, hp.k) <= hp.enumeration_cap ? ExpectationMode::exact
                                                     : ExpectationMode::monte_carlo;
}

NegativeExpectation negative_expectation(const EncodedBatch& batch, const HyperParams& hp, Rng* rng) {
  const ExpectationMode mode = resolve_mode(batch.n(), hp);
  if (mode == ExpectationMode::exact) return expectation_exact(batch, hp.k, hp.enumeration_cap);
  if (rng == nullptr) throw InvalidArgument("monte-carlo expectation requires a random stream");
  return expectation_monte_carlo(batch, hp.k, *rng, hp.mc_samples);
}

Params backprop_gradient(const Params& params, const std::vector<ForwardTrace>& traces,
                         const std::vector<Vector>& output_grads, double scale) {
  if (traces.size() != output_grads.size()) {
    throw ShapeError("backprop_gradient: one output gradient per trace required");
  }
  const std::size_t L = params.shape.L;
  Params grad = Params::zeros(params.shape);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const ForwardTrace& trace = traces[i];
    const Vector& g = output_grads[i];
    grad.layers[L].noalias() += scale * g * trace.hidden[L - 1].transpose();
    Vector u = params.layers[L].transpose() * g;
    for (std::size_t l = L; l-- > 0;) {
      const BitMask& mask = trace.masks[l];
      for (Index r = 0; r < u.size(); ++r) {
        if (!mask.test(static_cast<std::size_t>(r))) u(r) = 0.0;
      }
      grad.layers[l].noalias() += scale * u * layer_input(trace, l).transpose();
      if (l > 0) u = params.layers[l].transpose() * u;
    }
  }
  return grad;
}

GradientResult grad_params(const Params& query_params, const Params& key_params,
                           const Dataset& data, const HyperParams& hp, Rng* rng) {
  const EncodedBatch batch = encode(query_params, key_params, data);
  const NegativeExpectation expectation = negative_expectation(batch, hp, rng);
  GradientResult out;
  out.loss_vectors = loss_vectors(batch, expectation);
  out.loss = expectation.loss;
  out.mode = expectation.mode;
  const double scale = 1.0 / static_cast<double>(data.n());
  out.grad_query = backprop_gradient(query_params, batch.query_traces, out.loss_vectors.losstilde, scale);
  out.grad_key = backprop_gradient(key_params, batch.key_traces, out.loss_vectors.losshat, scale);
  return out;
}

}  // namespace clab
