#pragma once

#include <string>
#include <vector>

#include "contrastlab/contrastive.hpp"
#include "contrastlab/dataset.hpp"
#include "contrastlab/encoder.hpp"
#include "contrastlab/error.hpp"

namespace clab {

/// Leading constants for the Theta/O step-size, horizon and ball formulas.
struct TheoryConstants {
  double step = 1.0;
  double iterations = 1.0;
  double ball = 1.0;

  friend bool operator==(const TheoryConstants&, const TheoryConstants&) = default;
};

struct TheoryHyperParams {
  HyperParams hp;
  double omega = 0.0;
  double tau = 0.0;
};

/// eta = gamma = c_step d eps^2 delta^2 / (n^7 L^2 k m),
/// T = ceil(c_T n^10 L^2 k / (delta^3 eps^4)),
/// omega = tau = c_ball n^3.5 sqrt(d) / (delta eps sqrt(m)).
/// T saturates at SIZE_MAX.
TheoryHyperParams theoretical_hyperparams(std::size_t n, std::size_t k, std::size_t L,
                                          std::size_t m, std::size_t d, double delta,
                                          double epsilon, TheoryConstants constants = {});

/// State of iterate t, measured before the update out of it is applied.
struct StepRecord {
  std::size_t t = 0;
  double loss = 0.0;
  double losstilde_norm = 0.0;
  double losshat_norm = 0.0;
  double loss_vec_norm = 0.0;
  double grad_w_fro = 0.0;
  double grad_theta_fro = 0.0;
  double traj_w_fro = 0.0;
  double traj_theta_fro = 0.0;
  std::vector<double> traj_w_spectral;      // per layer, empty unless tracked
  std::vector<double> traj_theta_spectral;
  double step_ms = 0.0;                      // zero unless timing is enabled
};

struct TrainTrace {
  std::vector<StepRecord> records;  // t = 0..T
  HyperParams hp;
  ExpectationMode mode = ExpectationMode::exact;
};

struct TrainOptions {
  bool early_stop = false;       // halt once (1/t) sum ||l^(s)|| <= epsilon
  bool track_spectral = false;   // per-layer spectral distance to init at every t
  bool timing = false;           // wall clock in step_ms (breaks byte-determinism)
  std::uint64_t mc_seed = 0;     // Monte Carlo stream when exact enumeration is capped
};

/// Anchor for the trajectory radii: the parameters at t = 0.
struct TrainAnchor {
  const Params& query0;
  const Params& key0;
};

struct StepResult {
  Params query;
  Params key;
  StepRecord record;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, TrainTrace partial)
      : Error(ErrorCode::divergence, what), partial_(std::move(partial)) {}

  const TrainTrace& partial_trace() const noexcept { return partial_; }

 private:
  TrainTrace partial_;
};

/// Simultaneous update: both gradients are taken at (W^(t), theta^(t)).
StepResult gd_step(const Params& query, const Params& key, const Dataset& data,
                   const HyperParams& hp, const TrainAnchor& anchor, std::size_t t,
                   const TrainOptions& options = {});

struct TrainResult {
  TrainTrace trace;
  Params query;
  Params key;
  bool stopped_early = false;
};

/// Runs T steps and records T + 1 states (the last without an update).
TrainResult train(const Params& query0, const Params& key0, const Dataset& data,
                  const HyperParams& hp, const TrainOptions& options = {});

/// Running average (1/t) sum_{s<t} ||l^(s)|| for t = 1..T.
std::vector<double> running_loss_vec_average(const TrainTrace& trace);

/// The state for a record without taking a step.
StepRecord measure_state(const Params& query, const Params& key, const Dataset& data,
                         const HyperParams& hp, const TrainAnchor& anchor, std::size_t t,
                         const TrainOptions& options, GradientResult* gradient_out = nullptr);

}  // namespace clab
