#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "contrastlab/contrastive.hpp"
#include "contrastlab/dataset.hpp"
#include "contrastlab/encoder.hpp"
#include "contrastlab/trainer.hpp"

namespace clab {

enum class ProbeStatus { pass, fail, inconclusive };

const char* to_string(ProbeStatus status) noexcept;

/// Ordinary least squares y = intercept + slope * x.
struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  double residual_rms = 0.0;
  std::vector<double> x;
  std::vector<double> y;
};

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y);
/// Fit in log-log coordinates. Throws InvalidArgument on non-positive input.
LinearFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y);

struct ProbeCheck {
  std::string name;
  double value = 0.0;
  std::optional<double> min;
  std::optional<double> max;
  std::string gate_fit;  // a fit below gate_r2 turns the result inconclusive
  double gate_r2 = 0.9;
  ProbeStatus status = ProbeStatus::fail;
};

struct NamedFit {
  std::string name;
  LinearFit fit;
};

/// Outcome of one probe. Every check is decided from the stored values alone.
struct ProbeReport {
  std::string name;
  std::string citation;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::vector<std::pair<std::string, double>> scalars;
  std::vector<NamedFit> fits;
  std::vector<ProbeCheck> checks;
  std::vector<std::string> notes;

  void add_scalar(const std::string& key, double value);
  const LinearFit& add_fit(const std::string& key, LinearFit fit);
  const ProbeCheck& check(const std::string& key, double value, std::optional<double> min,
                          std::optional<double> max, const std::string& gate_fit = {},
                          double gate_r2 = 0.9);

  double scalar(const std::string& key) const;
  const LinearFit& fit(const std::string& key) const;
  const ProbeCheck& find_check(const std::string& key) const;

  /// fail if any check failed, else inconclusive if any was, else pass.
  ProbeStatus status() const;
  nlohmann::ordered_json to_json() const;
  std::string to_json_text() const;
  std::string to_table() const;
};

// ---------------------------------------------------------------- init probe

struct InitProbeOptions {
  double epsilon = 0.1;              // hidden norms must lie in [1 - eps, 1 + eps]
  double product_ratio_max = 4.0;    // ||W_b D .. D W_a||_2 <= c sqrt(L)
  double output_norm_max = 5.0;
  double separation_ratio_min = 0.25;
  std::size_t backward_probes = 8;   // random u per sample
  std::optional<double> delta;       // defaults to the realized dataset separation
  SpectralOptions spectral{.tol = 1e-3, .max_steps = 500};
  std::uint64_t seed = 0;
  const Params* query_init = nullptr;  // optional anchors for a distance report
  const Params* key_init = nullptr;
};

ProbeReport init_probe(const Params& query, const Params& key, const Dataset& data,
                       const InitProbeOptions& options = {});

/// Largest ||W_b D_{i,b-1} W_{b-1} ... D_{i,a} W_a||_2 over 1 <= a <= b <= L-1
/// and samples i, computed by batched power iteration. Zero when L < 2.
double max_masked_product_norm(const Params& p, const std::vector<ForwardTrace>& traces,
                               SpectralOptions options, bool* converged = nullptr);

// ------------------------------------------------------ gradient bound probe

struct GradientBoundSetup {
  std::size_t n = 8;
  std::size_t k = 2;
  std::size_t L = 3;
  std::size_t d = 32;
  std::size_t b = 16;
  double delta_min = 0.5;
  std::uint64_t seed = 1;
  std::size_t replicates = 8;
};

/// One initialization at width m.
struct GradientBoundSample {
  std::size_t m = 0;
  std::size_t replicate = 0;
  double grad_w_sq = 0.0;
  double grad_theta_sq = 0.0;
  double losstilde_sq = 0.0;
  double losshat_sq = 0.0;
};

/// The dataset is fixed by setup.seed; each replicate draws fresh encoders.
Dataset gradient_bound_dataset(const GradientBoundSetup& setup);
std::vector<GradientBoundSample> gradient_bound_samples(const GradientBoundSetup& setup,
                                                        std::size_t m);
/// r = ||grad||_F^2 n d / (m sum ||l_i||^2) per encoder, fitted against m.
ProbeReport gradient_bound_report(const GradientBoundSetup& setup,
                                  const std::vector<GradientBoundSample>& samples);
ProbeReport gradient_bound_probe(const GradientBoundSetup& setup,
                                 const std::vector<std::size_t>& m_grid);

// ---------------------------------------------------------- smoothness probe

struct SmoothnessOptions {
  std::vector<double> rhos;     // ascending; defaults to 9 points over [1e-4, 1e-2]
  double omega = 0.0;           // ball radii for the reference term; 0 = theory value
  double tau = 0.0;
  double exponent_min = 1.25;
  std::uint64_t seed = 0;
};

/// L(W + rho U, theta + rho V) - L(W, theta) - rho <grad, (U, V)>.
double taylor_residual(const Params& query, const Params& key, const Dataset& data,
                       const HyperParams& hp, const GradientResult& at, const Params& u,
                       const Params& v, double rho);

ProbeReport smoothness_probe(const Params& query, const Params& key, const Dataset& data,
                             const HyperParams& hp, const SmoothnessOptions& options = {});

// ------------------------------------------------------- trace-based checks

struct DescentScale {
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t m = 0;
  double delta = 0.0;
};

struct DescentOptions {
  double positive_fraction_min = 0.95;
  double decrease_fraction_min = 0.95;
  double running_average_ratio_max = 0.5;
};

/// c_t = (L_t - L_{t+1}) n^3 d / (min(eta, gamma) delta m ||l_t||^2).
ProbeReport descent_check(const TrainTrace& trace, const DescentScale& scale,
                          const DescentOptions& options = {});

ProbeReport trajectory_check(const TrainTrace& trace, double omega, double tau);

// ------------------------------------------------------ perturbation probe

enum class PerturbationDirection { gaussian, targeted };

struct PerturbationOptions {
  std::vector<double> omegas;  // ascending; defaults to 7 points over [1e-4, 1e-1]
  double flip_exponent = 2.0 / 3.0;
  double flip_tolerance = 0.2;
  double drift_exponent = 1.0;
  double drift_tolerance = 0.1;
  double drift_ratio_band = 2.0;
  std::uint64_t seed = 0;
};

struct PerturbationPoint {
  double omega = 0.0;
  std::size_t flips = 0;
  double flip_fraction = 0.0;
  double hidden_drift = 0.0;  // max over samples and layers
  double output_drift = 0.0;  // max over samples
};

/// Gaussian: one random direction per layer rescaled to spectral norm omega.
/// Targeted: per sample, each layer gets the rank-one perturbation of spectral
/// norm omega that pushes the smallest pre-activations across zero.
std::vector<PerturbationPoint> perturbation_sweep(const Params& p, const Dataset& data,
                                                  const std::vector<double>& omegas,
                                                  PerturbationDirection direction,
                                                  std::uint64_t seed);

ProbeReport perturbation_probe(const Params& p, const Dataset& data,
                               const PerturbationOptions& options = {});

// -------------------------------------------------- cross-entropy smoothness

struct CeSmoothnessOptions {
  std::size_t trials = 100000;
  std::size_t k = 16;      // dimensions drawn uniformly from 1..k
  double max_scale = 10.0;
  double tolerance = 1e-12;
  std::uint64_t seed = 0;
};

/// g(y) = log(1 + sum_j exp(y_j)) and its gradient.
double ce_value(const Vector& y);
Vector ce_gradient(const Vector& y);
/// g(y + y') - g(y) - grad g(y).y' - |y'|^2 / 2; never positive in exact arithmetic.
double ce_smoothness_gap(const Vector& y, const Vector& y_step);

ProbeReport ce_smoothness_check(const CeSmoothnessOptions& options = {});

}  // namespace clab
