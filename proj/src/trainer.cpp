#include "contrastlab/trainer.hpp"

#include <chrono>
#include <cmath>
#include <limits>

namespace clab {

TheoryHyperParams theoretical_hyperparams(std::size_t n, std::size_t k, std::size_t L,
                                          std::size_t m, std::size_t d, double delta,
                                          double epsilon, TheoryConstants constants) {
  if (n == 0 || k == 0 || L == 0 || m == 0 || d == 0) {
    throw InvalidArgument("theoretical_hyperparams: counts must be positive");
  }
  if (!(delta > 0.0)) throw InvalidArgument("theoretical_hyperparams: delta must be positive");
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw InvalidArgument("theoretical_hyperparams: epsilon must lie in (0, 1)");
  }
  const double nn = static_cast<double>(n);
  const double kk = static_cast<double>(k);
  const double LL = static_cast<double>(L);
  const double mm = static_cast<double>(m);
  const double dd = static_cast<double>(d);

  TheoryHyperParams out;
  out.hp.k = k;
  out.hp.epsilon = epsilon;
  const double step = constants.step * dd * epsilon * epsilon * delta * delta /
                      (std::pow(nn, 7) * LL * LL * kk * mm);
  out.hp.eta = step;
  out.hp.gamma = step;
  const double horizon = std::ceil(constants.iterations * std::pow(nn, 10) * LL * LL * kk /
                                   (std::pow(delta, 3) * std::pow(epsilon, 4)));
  out.hp.T = horizon >= static_cast<double>(std::numeric_limits<std::size_t>::max())
                 ? std::numeric_limits<std::size_t>::max()
                 : static_cast<std::size_t>(horizon);
  const double radius = constants.ball * std::pow(nn, 3.5) * std::sqrt(dd) /
                        (delta * epsilon * std::sqrt(mm));
  out.omega = radius;
  out.tau = radius;
  return out;
}

namespace {

std::vector<double> layer_spectral_distances(const Params& current, const Params& anchor) {
  std::vector<double> out;
  for (std::size_t l = 0; l < current.layers.size(); ++l) {
    Matrix diff = current.layers[l] - anchor.layers[l];
    out.push_back(diff.isZero(0.0) ? 0.0 : spectral_norm(diff, {.tol = 1e-6, .max_steps = 10000}));
  }
  return out;
}

double distance(const Params& a, const Params& b) {
  double sum = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) sum += (a.layers[l] - b.layers[l]).squaredNorm();
  return std::sqrt(sum);
}

}  // namespace

StepRecord measure_state(const Params& query, const Params& key, const Dataset& data,
                         const HyperParams& hp, const TrainAnchor& anchor, std::size_t t,
                         const TrainOptions& options, GradientResult* gradient_out) {
  Rng mc = Rng(options.mc_seed, hash_label("train-monte-carlo")).child(static_cast<std::uint64_t>(t));
  GradientResult g = grad_params(query, key, data, hp, &mc);
  StepRecord record;
  record.t = t;
  record.loss = g.loss;
  record.losstilde_norm = g.loss_vectors.losstilde_norm();
  record.losshat_norm = g.loss_vectors.losshat_norm();
  record.loss_vec_norm = std::hypot(record.losstilde_norm, record.losshat_norm);
  record.grad_w_fro = g.grad_query.frobenius_norm();
  record.grad_theta_fro = g.grad_key.frobenius_norm();
  record.traj_w_fro = distance(query, anchor.query0);
  record.traj_theta_fro = distance(key, anchor.key0);
  if (options.track_spectral) {
    record.traj_w_spectral = layer_spectral_distances(query, anchor.query0);
    record.traj_theta_spectral = layer_spectral_distances(key, anchor.key0);
  }
  if (gradient_out) *gradient_out = std::move(g);
  return record;
}

StepResult gd_step(const Params& query, const Params& key, const Dataset& data,
                   const HyperParams& hp, const TrainAnchor& anchor, std::size_t t,
                   const TrainOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  GradientResult g;
  StepRecord record = measure_state(query, key, data, hp, anchor, t, options, &g);
  if (!std::isfinite(record.loss) || !g.grad_query.all_finite() || !g.grad_key.all_finite()) {
    throw DivergenceError("gd_step: non-finite loss or gradient at t=" + std::to_string(t) +
                              " (loss=" + std::to_string(record.loss) +
                              ", |grad_W|=" + std::to_string(record.grad_w_fro) +
                              ", |grad_theta|=" + std::to_string(record.grad_theta_fro) + ")",
                          TrainTrace{});
  }
  StepResult out{axpy(query, g.grad_query, -hp.eta), axpy(key, g.grad_key, -hp.gamma), record};
  out.query.provenance = query.provenance;
  out.key.provenance = key.provenance;
  if (options.timing) {
    out.record.step_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }
  return out;
}

TrainResult train(const Params& query0, const Params& key0, const Dataset& data,
                  const HyperParams& hp, const TrainOptions& options) {
  hp.validate(data.n());
  require_same_shape(query0, key0, "train");
  const TrainAnchor anchor{query0, key0};
  TrainResult result{{}, query0, key0, false};
  result.trace.hp = hp;
  result.trace.mode = resolve_mode(data.n(), hp);
  double running = 0.0;
  for (std::size_t t = 0; t < hp.T; ++t) {
    StepResult step;
    try {
      step = gd_step(result.query, result.key, data, hp, anchor, t, options);
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.what(), result.trace);
    }
    running += step.record.loss_vec_norm;
    result.trace.records.push_back(std::move(step.record));
    result.query = std::move(step.query);
    result.key = std::move(step.key);
    if (options.early_stop && running / static_cast<double>(t + 1) <= hp.epsilon) {
      result.stopped_early = true;
      break;
    }
  }
  const std::size_t final_t = result.trace.records.size();
  const auto start = std::chrono::steady_clock::now();
  StepRecord last = measure_state(result.query, result.key, data, hp, anchor, final_t, options);
  if (options.timing) {
    last.step_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }
  result.trace.records.push_back(std::move(last));
  return result;
}

std::vector<double> running_loss_vec_average(const TrainTrace& trace) {
  std::vector<double> out;
  double sum = 0.0;
  // The final record has no update out of it, so it is not part of the average.
  for (std::size_t t = 0; t + 1 < trace.records.size(); ++t) {
    sum += trace.records[t].loss_vec_norm;
    out.push_back(sum / static_cast<double>(t + 1));
  }
  return out;
}

}  // namespace clab
