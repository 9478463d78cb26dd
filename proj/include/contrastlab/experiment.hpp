#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "contrastlab/contrastive.hpp"
#include "contrastlab/monitors.hpp"
#include "contrastlab/trainer.hpp"

namespace clab {

const char* version_string() noexcept;

enum class StepMode { practical, theoretical };

/// eta = gamma = kDefaultStepScale * d / m when a practical config leaves the
/// step sizes out. Calibrated on the default desk configuration.
constexpr double kDefaultStepScale = 0.5;

/// Larger theoretical horizons are rejected unless T is given explicitly.
constexpr double kMaxTheoreticalT = 1e7;

struct ExperimentConfig {
  // required
  std::size_t n = 0;
  std::size_t k = 0;
  std::size_t L = 0;
  std::size_t m = 0;
  std::size_t d = 0;
  std::size_t b = 0;
  std::uint64_t seed = 0;

  double delta_min = 0.5;
  double epsilon = 0.5;
  StepMode step_mode = StepMode::practical;
  std::optional<double> eta;
  std::optional<double> gamma;
  double step_scale = kDefaultStepScale;
  TheoryConstants theory;
  std::optional<std::size_t> T;  // 200 in practical mode, the formula in theoretical mode
  std::size_t mc_samples = 1000;
  std::uint64_t enumeration_cap = kDefaultEnumerationCap;
  ExpectationMode expectation = ExpectationMode::automatic;
  std::vector<std::string> probes;  // empty selects every probe
  std::string out_dir = "out";
  bool timing = false;
  bool early_stop = false;
  bool track_spectral = false;
  std::vector<std::size_t> m_grid = {256, 1024, 4096};
  std::size_t replicates = 8;
  std::size_t verify_width = 64;

  /// Unknown keys and invariant violations throw ParseError naming the field.
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  nlohmann::ordered_json to_json() const;
  std::string serialize() const;
  void validate() const;

  Shape shape() const;
  /// Resolved step sizes and horizon.
  HyperParams hyperparams(double delta) const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

const std::vector<std::string>& known_probes();

/// Dataset and initial encoders, all derived from config.seed.
struct ExperimentSetup {
  Dataset data;
  Params query0;
  Params key0;
};

ExperimentSetup make_setup(const ExperimentConfig& config);

/// Oracle-equivalence suite: analytic gradients and loss-vectors against
/// central differences, exact expectation against brute-force enumeration,
/// Monte Carlo against the exact loss, and the cross-entropy smoothness check.
ProbeReport verify_suite(const ExperimentConfig& config);

/// Exit codes shared by the CLI and the C API.
enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,
  kExitInconclusive = 2,
  kExitUsage = 3,
  kExitRuntime = 4,
};

struct CommandResult {
  int exit_code = kExitOk;
  nlohmann::ordered_json summary;
  std::vector<std::string> artifacts;
};

/// train | verify | probe | sweep. Artifacts go under config.out_dir.
CommandResult run_command(const std::string& command, const ExperimentConfig& config);

/// CSV with header t,loss,losstilde_norm,...,step_ms and 17 significant digits.
void emit_trace(const TrainTrace& trace, const std::string& path);
std::string trace_csv(const TrainTrace& trace);
/// Long format t,metric,value for plotting tools.
std::string trace_long_csv(const TrainTrace& trace);

int exit_code_for(ProbeStatus status) noexcept;

}  // namespace clab
