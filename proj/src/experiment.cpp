#include "contrastlab/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "contrastlab/error.hpp"
#include "contrastlab/oracle.hpp"
#include "text_format.hpp"

#ifndef CONTRASTLAB_VERSION
#define CONTRASTLAB_VERSION "0.0.0"
#endif

namespace clab {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr std::size_t kDefaultT = 200;

const char* to_string(StepMode mode) {
  return mode == StepMode::practical ? "practical" : "theoretical";
}

// -- config field readers ------------------------------------------------------

const json* field(const json& doc, const char* key) {
  auto it = doc.find(key);
  return it == doc.end() ? nullptr : &*it;
}

std::uint64_t read_count(const json& doc, const char* key) {
  const json* v = field(doc, key);
  if (!v) throw ParseError(std::string("config: missing required field '") + key + "'");
  if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0)) {
    throw ParseError(std::string("config: field '") + key + "' must be a non-negative integer");
  }
  return v->get<std::uint64_t>();
}

template <typename T>
void read_optional_count(const json& doc, const char* key, T& out) {
  if (field(doc, key)) out = static_cast<T>(read_count(doc, key));
}

void read_optional_real(const json& doc, const char* key, double& out) {
  const json* v = field(doc, key);
  if (!v) return;
  if (!v->is_number()) throw ParseError(std::string("config: field '") + key + "' must be a number");
  out = v->get<double>();
}

void read_optional_bool(const json& doc, const char* key, bool& out) {
  const json* v = field(doc, key);
  if (!v) return;
  if (!v->is_boolean()) throw ParseError(std::string("config: field '") + key + "' must be true or false");
  out = v->get<bool>();
}

std::string read_string(const json& doc, const char* key) {
  const json* v = field(doc, key);
  if (!v->is_string()) throw ParseError(std::string("config: field '") + key + "' must be a string");
  return v->get<std::string>();
}

json json_of_stamp(const ExperimentConfig& config) {
  return json{{"version", version_string()}, {"config", config.to_json()}};
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::string describe(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "n=" << c.n << " k=" << c.k << " L=" << c.L << " m=" << c.m << " d=" << c.d << " b=" << c.b
     << " seed=" << c.seed;
  return os.str();
}

std::size_t worker_threads(std::size_t jobs) {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CONTRAST_LAB_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) cap = v;
  }
  return std::max<std::size_t>(1, std::min(cap, jobs));
}

}  // namespace

const char* version_string() noexcept { return CONTRASTLAB_VERSION; }

const std::vector<std::string>& known_probes() {
  static const std::vector<std::string> names = {"init",       "gradient_bound", "smoothness",
                                                 "descent",    "trajectory",     "perturbation",
                                                 "ce_smoothness"};
  return names;
}

// -- config ------------------------------------------------------------------------

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("config: the document must be a JSON object");

  static const std::set<std::string> keys = {
      "n", "k", "L", "m", "d", "b", "seed", "delta_min", "epsilon", "step_mode", "eta", "gamma",
      "step_scale", "theory", "T", "mc_samples", "enumeration_cap", "expectation", "probes",
      "out_dir", "timing", "early_stop", "track_spectral", "m_grid", "replicates", "verify_width"};
  for (const auto& item : doc.items()) {
    if (!keys.count(item.key())) throw ParseError("config: unknown field '" + item.key() + "'");
  }

  ExperimentConfig c;
  c.n = read_count(doc, "n");
  c.k = read_count(doc, "k");
  c.L = read_count(doc, "L");
  c.m = read_count(doc, "m");
  c.d = read_count(doc, "d");
  c.b = read_count(doc, "b");
  c.seed = read_count(doc, "seed");
  read_optional_real(doc, "delta_min", c.delta_min);
  read_optional_real(doc, "epsilon", c.epsilon);
  if (field(doc, "step_mode")) {
    const std::string mode = read_string(doc, "step_mode");
    if (mode == "practical") {
      c.step_mode = StepMode::practical;
    } else if (mode == "theoretical") {
      c.step_mode = StepMode::theoretical;
    } else {
      throw ParseError("config: step_mode must be practical or theoretical (got '" + mode + "')");
    }
  }
  if (field(doc, "eta")) read_optional_real(doc, "eta", c.eta.emplace());
  if (field(doc, "gamma")) read_optional_real(doc, "gamma", c.gamma.emplace());
  read_optional_real(doc, "step_scale", c.step_scale);
  if (const json* th = field(doc, "theory")) {
    if (!th->is_object()) throw ParseError("config: field 'theory' must be an object");
    for (const auto& item : th->items()) {
      if (item.key() != "step" && item.key() != "iterations" && item.key() != "ball") {
        throw ParseError("config: unknown field 'theory." + item.key() + "'");
      }
    }
    read_optional_real(*th, "step", c.theory.step);
    read_optional_real(*th, "iterations", c.theory.iterations);
    read_optional_real(*th, "ball", c.theory.ball);
  }
  if (field(doc, "T")) c.T = read_count(doc, "T");
  read_optional_count(doc, "mc_samples", c.mc_samples);
  read_optional_count(doc, "enumeration_cap", c.enumeration_cap);
  if (field(doc, "expectation")) {
    try {
      c.expectation = expectation_mode_from_string(read_string(doc, "expectation"));
    } catch (const ParseError& e) {
      throw ParseError(std::string("config: field 'expectation': ") + e.what());
    }
  }
  if (const json* p = field(doc, "probes")) {
    if (!p->is_array()) throw ParseError("config: field 'probes' must be a list of probe names");
    for (const auto& name : *p) {
      if (!name.is_string()) throw ParseError("config: field 'probes' must be a list of probe names");
      c.probes.push_back(name.get<std::string>());
    }
  }
  if (field(doc, "out_dir")) c.out_dir = read_string(doc, "out_dir");
  read_optional_bool(doc, "timing", c.timing);
  read_optional_bool(doc, "early_stop", c.early_stop);
  read_optional_bool(doc, "track_spectral", c.track_spectral);
  if (const json* g = field(doc, "m_grid")) {
    if (!g->is_array()) throw ParseError("config: field 'm_grid' must be a list of widths");
    c.m_grid.clear();
    for (const auto& w : *g) {
      if (!w.is_number_unsigned()) throw ParseError("config: field 'm_grid' must hold positive integers");
      c.m_grid.push_back(w.get<std::size_t>());
    }
  }
  read_optional_count(doc, "replicates", c.replicates);
  read_optional_count(doc, "verify_width", c.verify_width);

  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str());
}

void ExperimentConfig::validate() const {
  if (n < 2) throw InvalidArgument("n must be ≥ 2");
  if (k < 1) throw InvalidArgument("k must be ≥ 1");
  if (k > n - 1) throw InvalidArgument("k must be ≤ n−1");
  if (L < 1) throw InvalidArgument("L must be ≥ 1");
  if (m < 1) throw InvalidArgument("m must be ≥ 1");
  if (d < 1) throw InvalidArgument("d must be ≥ 1");
  if (b < 1) throw InvalidArgument("b must be ≥ 1");
  if (!(delta_min > 0.0 && delta_min < 2.0)) throw InvalidArgument("delta_min must lie in (0, 2)");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw InvalidArgument("epsilon must lie in (0, 1)");
  if (eta && !(*eta >= 0.0 && std::isfinite(*eta))) throw InvalidArgument("eta must be finite and ≥ 0");
  if (gamma && !(*gamma >= 0.0 && std::isfinite(*gamma))) throw InvalidArgument("gamma must be finite and ≥ 0");
  if (step_mode == StepMode::theoretical && (eta || gamma)) {
    throw InvalidArgument("eta and gamma are derived in theoretical step_mode; remove them or use practical");
  }
  if (!(step_scale > 0.0 && std::isfinite(step_scale))) throw InvalidArgument("step_scale must be > 0");
  if (!(theory.step > 0.0) || !(theory.iterations > 0.0) || !(theory.ball > 0.0)) {
    throw InvalidArgument("theory constants must be > 0");
  }
  if (T && *T < 1) throw InvalidArgument("T must be ≥ 1");
  if (step_mode == StepMode::theoretical && !T) {
    const double horizon = theoretical_hyperparams(n, k, L, m, d, delta_min, epsilon, theory).hp.T;
    if (horizon > kMaxTheoreticalT) {
      throw InvalidArgument("theoretical horizon T = " + detail::format_double(horizon) +
                            " is infeasible at this scale; set T explicitly");
    }
  }
  if (mc_samples < 2) throw InvalidArgument("mc_samples must be ≥ 2");
  if (enumeration_cap < 1) throw InvalidArgument("enumeration_cap must be ≥ 1");
  for (const std::string& p : probes) {
    const auto& names = known_probes();
    if (std::find(names.begin(), names.end(), p) == names.end()) {
      throw InvalidArgument("probes: unknown probe '" + p + "'");
    }
  }
  if (out_dir.empty()) throw InvalidArgument("out_dir must not be empty");
  if (m_grid.empty()) throw InvalidArgument("m_grid must not be empty");
  for (std::size_t w : m_grid) {
    if (w < 1) throw InvalidArgument("m_grid entries must be ≥ 1");
  }
  if (replicates < 1) throw InvalidArgument("replicates must be ≥ 1");
  if (verify_width < 1) throw InvalidArgument("verify_width must be ≥ 1");
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  json out;
  out["n"] = n;
  out["k"] = k;
  out["L"] = L;
  out["m"] = m;
  out["d"] = d;
  out["b"] = b;
  out["seed"] = seed;
  out["delta_min"] = delta_min;
  out["epsilon"] = epsilon;
  out["step_mode"] = to_string(step_mode);
  if (eta) out["eta"] = *eta;
  if (gamma) out["gamma"] = *gamma;
  out["step_scale"] = step_scale;
  out["theory"] = json{{"step", theory.step}, {"iterations", theory.iterations}, {"ball", theory.ball}};
  if (T) out["T"] = *T;
  out["mc_samples"] = mc_samples;
  out["enumeration_cap"] = enumeration_cap;
  out["expectation"] = to_string(expectation);
  out["probes"] = probes;
  out["out_dir"] = out_dir;
  out["timing"] = timing;
  out["early_stop"] = early_stop;
  out["track_spectral"] = track_spectral;
  out["m_grid"] = m_grid;
  out["replicates"] = replicates;
  out["verify_width"] = verify_width;
  return out;
}

std::string ExperimentConfig::serialize() const { return to_json().dump(2) + "\n"; }

Shape ExperimentConfig::shape() const { return Shape{L, m, d, b}; }

HyperParams ExperimentConfig::hyperparams(double delta) const {
  HyperParams hp;
  hp.k = k;
  hp.epsilon = epsilon;
  hp.mode = expectation;
  hp.mc_samples = mc_samples;
  hp.enumeration_cap = enumeration_cap;
  if (step_mode == StepMode::theoretical) {
    const TheoryHyperParams th = theoretical_hyperparams(n, k, L, m, d, delta, epsilon, theory);
    hp.eta = th.hp.eta;
    hp.gamma = th.hp.gamma;
    hp.T = T.value_or(th.hp.T);
  } else {
    const double fallback = step_scale * static_cast<double>(d) / static_cast<double>(m);
    hp.eta = eta.value_or(fallback);
    hp.gamma = gamma.value_or(fallback);
    hp.T = T.value_or(kDefaultT);
  }
  return hp;
}

ExperimentSetup make_setup(const ExperimentConfig& config) {
  config.validate();
  const Rng root(config.seed);
  Rng data_rng = root.child("data");
  Rng query_rng = root.child("query-init");
  Rng key_rng = root.child("key-init");
  ExperimentSetup s;
  s.data = generate_separated(data_rng, config.n, config.b, config.delta_min);
  s.query0 = init_params(query_rng, config.shape());
  s.query0.provenance.label = "query-init";
  s.key0 = init_params(key_rng, config.shape());
  s.key0.provenance.label = "key-init";
  return s;
}

// -- verify --------------------------------------------------------------------------

namespace {

// Loss-vector error: per-sample |analytic - fd|_2 relative to max(|fd_i|_2, 1e-3 max_j |fd_j|_2).
double loss_vector_error(const std::vector<Vector>& analytic, const std::vector<Vector>& numeric) {
  double scale = 0.0;
  for (const Vector& v : numeric) scale = std::max(scale, v.norm());
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max(numeric[i].norm(), 1e-3 * scale);
    if (denom == 0.0) continue;
    worst = std::max(worst, (analytic[i] - numeric[i]).norm() / denom);
  }
  return worst;
}

}  // namespace

ProbeReport verify_suite(const ExperimentConfig& config) {
  ExperimentConfig small = config;
  small.m = std::min(config.m, config.verify_width);
  const ExperimentSetup setup = make_setup(small);
  const std::size_t n = small.n;
  const std::size_t k = small.k;
  const double h = 1e-5;

  ProbeReport report;
  report.name = "verify";
  report.citation = "closed-form gradients and loss-vectors against brute-force references";
  report.config = json{{"n", n}, {"k", k}, {"L", small.L}, {"m", small.m}, {"d", small.d},
                       {"b", small.b}, {"seed", small.seed}, {"fd_step", h}};

  if (binomial(n - 1, k) > small.enumeration_cap) {
    throw EnumerationError("verify: exact expectation needs C(n-1, k) <= enumeration_cap; use a smaller n");
  }

  HyperParams hp = small.hyperparams(setup.data.delta);
  hp.mode = ExpectationMode::exact;

  // Parameter gradients against central differences of the enumeration oracle.
  const auto oracle_loss = [&](const Params& q, const Params& kk) {
    const EncodedBatch batch = encode(q, kk, setup.data);
    return oracle::total_loss_by_enumeration(batch.queries, batch.keys, k);
  };
  const GradientResult analytic = grad_params(setup.query0, setup.key0, setup.data, hp);
  const oracle::ParamsPair numeric = oracle::fd_gradient(oracle_loss, setup.query0, setup.key0, h);
  const oracle::KinkMask mask = oracle::kink_mask(setup.query0, setup.key0, setup.data, h);
  const oracle::GradientComparison cmp =
      oracle::compare_gradients({analytic.grad_query, analytic.grad_key}, numeric, mask, 1e-3);
  report.add_scalar("gradient.max_relative_error", cmp.max_relative_error);
  report.add_scalar("gradient.compared", static_cast<double>(cmp.compared));
  report.add_scalar("gradient.kink_fraction", mask.fraction());
  if (!cmp.worst_coordinate.empty()) report.notes.push_back("worst gradient coordinate: " + cmp.worst_coordinate);
  report.check("gradient.max_relative_error", cmp.max_relative_error, std::nullopt, 1e-5);
  report.check("gradient.kink_fraction", mask.fraction(), std::nullopt, 0.05);

  // Loss-vectors against differences of n * L_S in the outputs.
  const EncodedBatch batch = encode(setup.query0, setup.key0, setup.data);
  const LossVectors lv = loss_vectors(batch, expectation_exact(batch, k, small.enumeration_cap));
  const double nn = static_cast<double>(n);
  std::vector<Vector> fd_q, fd_k;
  for (std::size_t i = 0; i < n; ++i) {
    fd_q.push_back(oracle::fd_row_gradient(
        [&](const Matrix& Q) { return nn * oracle::total_loss_by_enumeration(Q, batch.keys, k); },
        batch.queries, static_cast<Index>(i), h));
    fd_k.push_back(oracle::fd_row_gradient(
        [&](const Matrix& K) { return nn * oracle::total_loss_by_enumeration(batch.queries, K, k); },
        batch.keys, static_cast<Index>(i), h));
  }
  const double err_tilde = loss_vector_error(lv.losstilde, fd_q);
  const double err_hat = loss_vector_error(lv.losshat, fd_k);
  Vector sum = Vector::Zero(static_cast<Index>(small.d));
  double mass = 0.0;
  for (const Vector& v : lv.losshat) {
    sum += v;
    mass += v.norm();
  }
  const double sum_rel = mass > 0.0 ? sum.norm() / mass : 0.0;
  report.add_scalar("losstilde.max_relative_error", err_tilde);
  report.add_scalar("losshat.max_relative_error", err_hat);
  report.add_scalar("losshat.sum_relative", sum_rel);
  report.check("losstilde.max_relative_error", err_tilde, std::nullopt, 1e-7);
  report.check("losshat.max_relative_error", err_hat, std::nullopt, 1e-7);
  report.check("losshat.sum_relative", sum_rel, std::nullopt, 1e-10);

  // Exact expectation against recursive enumeration on random outputs.
  Rng rng = Rng(small.seed, hash_label("verify"));
  double enum_err = 0.0;
  for (std::size_t nn2 = 2; nn2 <= 10; ++nn2) {
    for (std::size_t kk = 1; kk <= std::min<std::size_t>(4, nn2 - 1); ++kk) {
      Rng r = rng.child("enumeration").child(static_cast<std::uint64_t>(nn2 * 16 + kk));
      const Matrix Q = gaussian_matrix(r, static_cast<Index>(nn2), static_cast<Index>(small.d), 1.0);
      const Matrix K = gaussian_matrix(r, static_cast<Index>(nn2), static_cast<Index>(small.d), 1.0);
      const double exact = total_loss_exact(batch_from_outputs(Q, K), kk);
      const double brute = oracle::total_loss_by_enumeration(Q, K, kk);
      enum_err = std::max(enum_err, std::abs(exact - brute) / std::max(1.0, std::abs(brute)));
    }
  }
  double pair_err = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const Vector a = losshat_pair(batch, i, j, k, small.enumeration_cap);
      const Vector o = oracle::losshat_pair_by_enumeration(batch.queries, batch.keys, i, j, k);
      pair_err = std::max(pair_err, (a - o).norm() / std::max(1.0, o.norm()));
    }
  }
  report.add_scalar("enumeration.max_error", enum_err);
  report.add_scalar("losshat_pair.max_error", pair_err);
  report.check("enumeration.max_error", enum_err, std::nullopt, 1e-14);
  report.check("losshat_pair.max_error", pair_err, std::nullopt, 1e-14);

  // Monte Carlo estimate against the exact loss.
  Rng mc = rng.child("monte-carlo");
  const MonteCarloEstimate est = total_loss_mc(batch, k, mc, 10000);
  const double exact = total_loss_exact(batch, k, small.enumeration_cap);
  const double z = est.standard_error > 0.0 ? std::abs(est.estimate - exact) / est.standard_error : 0.0;
  report.add_scalar("monte_carlo.z_score", z);
  report.check("monte_carlo.z_score", z, std::nullopt, 3.0);

  CeSmoothnessOptions ce;
  ce.trials = 10000;
  ce.seed = small.seed;
  const ProbeReport ce_report = ce_smoothness_check(ce);
  report.add_scalar("ce_smoothness.violations", ce_report.scalar("violations"));
  report.check("ce_smoothness.violations", ce_report.scalar("violations"), std::nullopt, 0.0);
  return report;
}

// -- traces ----------------------------------------------------------------------------

std::string trace_csv(const TrainTrace& trace) {
  std::string out =
      "t,loss,losstilde_norm,losshat_norm,loss_vec_norm,grad_w_fro,grad_theta_fro,traj_w_fro,"
      "traj_theta_fro,step_ms\n";
  for (const StepRecord& r : trace.records) {
    out += std::to_string(r.t);
    for (double v : {r.loss, r.losstilde_norm, r.losshat_norm, r.loss_vec_norm, r.grad_w_fro,
                     r.grad_theta_fro, r.traj_w_fro, r.traj_theta_fro, r.step_ms}) {
      out += ',';
      out += detail::format_double(v);
    }
    out += '\n';
  }
  return out;
}

std::string trace_long_csv(const TrainTrace& trace) {
  std::string out = "t,metric,value\n";
  for (const StepRecord& r : trace.records) {
    const std::pair<const char*, double> cols[] = {
        {"loss", r.loss},           {"losstilde_norm", r.losstilde_norm},
        {"losshat_norm", r.losshat_norm}, {"loss_vec_norm", r.loss_vec_norm},
        {"grad_w_fro", r.grad_w_fro}, {"grad_theta_fro", r.grad_theta_fro},
        {"traj_w_fro", r.traj_w_fro}, {"traj_theta_fro", r.traj_theta_fro},
        {"step_ms", r.step_ms}};
    for (const auto& [name, value] : cols) {
      out += std::to_string(r.t) + "," + name + "," + detail::format_double(value) + "\n";
    }
    for (std::size_t l = 0; l < r.traj_w_spectral.size(); ++l) {
      out += std::to_string(r.t) + ",traj_w_spectral_" + std::to_string(l) + "," +
             detail::format_double(r.traj_w_spectral[l]) + "\n";
    }
    for (std::size_t l = 0; l < r.traj_theta_spectral.size(); ++l) {
      out += std::to_string(r.t) + ",traj_theta_spectral_" + std::to_string(l) + "," +
             detail::format_double(r.traj_theta_spectral[l]) + "\n";
    }
  }
  return out;
}

void emit_trace(const TrainTrace& trace, const std::string& path) {
  write_file(path, trace_csv(trace));
}

int exit_code_for(ProbeStatus status) noexcept {
  switch (status) {
    case ProbeStatus::pass: return kExitOk;
    case ProbeStatus::fail: return kExitCheckFailed;
    case ProbeStatus::inconclusive: return kExitInconclusive;
  }
  return kExitCheckFailed;
}

// -- commands ----------------------------------------------------------------------------

namespace {

struct Outputs {
  fs::path dir;
  std::vector<std::string> written;

  explicit Outputs(const std::string& out_dir) : dir(out_dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + out_dir + "': " + ec.message());
  }

  void write(const std::string& name, const std::string& bytes) {
    write_file(dir / name, bytes);
    written.push_back((dir / name).string());
  }

  void write_json(const std::string& name, const json& value) { write(name, value.dump(2) + "\n"); }
};

json record_json(const StepRecord& r) {
  return json{{"t", r.t},
              {"loss", r.loss},
              {"losstilde_norm", r.losstilde_norm},
              {"losshat_norm", r.losshat_norm},
              {"loss_vec_norm", r.loss_vec_norm},
              {"grad_w_fro", r.grad_w_fro},
              {"grad_theta_fro", r.grad_theta_fro},
              {"traj_w_fro", r.traj_w_fro},
              {"traj_theta_fro", r.traj_theta_fro}};
}

json stamped_report(const ExperimentConfig& config, const ProbeReport& report) {
  json out = json_of_stamp(config);
  out["report"] = report.to_json();
  return out;
}

TrainOptions train_options(const ExperimentConfig& config) {
  TrainOptions o;
  o.early_stop = config.early_stop;
  o.track_spectral = config.track_spectral;
  o.timing = config.timing;
  o.mc_seed = config.seed;
  return o;
}

Params labelled(Params p, const ExperimentConfig& config, const char* role) {
  p.provenance.label = json{{"role", role}, {"version", version_string()}, {"config", config.to_json()}}.dump();
  return p;
}

CommandResult run_train(const ExperimentConfig& config) {
  const ExperimentSetup setup = make_setup(config);
  const HyperParams hp = config.hyperparams(setup.data.delta);
  Outputs out(config.out_dir);
  json dataset = json_of_stamp(config);
  dataset["dataset"] = json::parse(dataset_to_json(setup.data));
  out.write_json("dataset.json", dataset);

  CommandResult result;
  json summary = json_of_stamp(config);
  summary["command"] = "train";
  summary["eta"] = hp.eta;
  summary["gamma"] = hp.gamma;
  summary["T"] = hp.T;
  summary["delta"] = setup.data.delta;
  summary["expectation"] = to_string(resolve_mode(config.n, hp));

  TrainResult trained;
  try {
    trained = train(setup.query0, setup.key0, setup.data, hp, train_options(config));
  } catch (const DivergenceError& e) {
    out.write("trace.csv", trace_csv(e.partial_trace()));
    summary["status"] = "diverged";
    summary["error"] = e.what();
    summary["records"] = e.partial_trace().records.size();
    out.write_json("summary.json", summary);
    throw;
  }
  out.write("trace.csv", trace_csv(trained.trace));
  out.write("trace_long.csv", trace_long_csv(trained.trace));
  save_params(labelled(trained.query, config, "query-final"), (out.dir / "query_params.bin").string());
  out.written.push_back((out.dir / "query_params.bin").string());
  save_params(labelled(trained.key, config, "key-final"), (out.dir / "key_params.bin").string());
  out.written.push_back((out.dir / "key_params.bin").string());

  const std::vector<double> running = running_loss_vec_average(trained.trace);
  summary["status"] = "completed";
  summary["stopped_early"] = trained.stopped_early;
  summary["records"] = trained.trace.records.size();
  summary["initial"] = record_json(trained.trace.records.front());
  summary["final"] = record_json(trained.trace.records.back());
  summary["running_average_final"] = running.empty() ? 0.0 : running.back();
  out.write_json("summary.json", summary);

  result.summary = summary;
  result.artifacts = out.written;
  return result;
}

ProbeReport run_probe(const std::string& name, const ExperimentConfig& config,
                      const ExperimentSetup& setup, const std::optional<TrainResult>& trained) {
  const HyperParams hp = config.hyperparams(setup.data.delta);
  if (name == "init") {
    InitProbeOptions o;
    o.seed = config.seed;
    return init_probe(setup.query0, setup.key0, setup.data, o);
  }
  if (name == "gradient_bound") {
    GradientBoundSetup g{config.n, config.k, config.L, config.d, config.b,
                         config.delta_min, config.seed, config.replicates};
    return gradient_bound_probe(g, config.m_grid);
  }
  if (name == "smoothness") {
    SmoothnessOptions o;
    o.seed = config.seed;
    return smoothness_probe(setup.query0, setup.key0, setup.data, hp, o);
  }
  if (name == "descent") {
    return descent_check(trained->trace, DescentScale{config.n, config.d, config.m, setup.data.delta});
  }
  if (name == "trajectory") {
    const TheoryHyperParams th = theoretical_hyperparams(config.n, config.k, config.L, config.m, config.d,
                                                         setup.data.delta, config.epsilon, config.theory);
    return trajectory_check(trained->trace, th.omega, th.tau);
  }
  if (name == "perturbation") {
    PerturbationOptions o;
    o.seed = config.seed;
    return perturbation_probe(setup.query0, setup.data, o);
  }
  CeSmoothnessOptions o;
  o.seed = config.seed;
  return ce_smoothness_check(o);
}

CommandResult run_probes(const ExperimentConfig& config) {
  const std::vector<std::string> selected = config.probes.empty() ? known_probes() : config.probes;
  const ExperimentSetup setup = make_setup(config);
  std::optional<TrainResult> trained;
  const bool needs_training = std::any_of(selected.begin(), selected.end(), [](const std::string& p) {
    return p == "descent" || p == "trajectory";
  });
  if (needs_training) {
    trained = train(setup.query0, setup.key0, setup.data, config.hyperparams(setup.data.delta),
                    train_options(config));
  }

  Outputs out(config.out_dir);
  CommandResult result;
  json summary = json_of_stamp(config);
  summary["command"] = "probe";
  json statuses = json::object();
  std::string table;
  bool failed = false, inconclusive = false;
  for (const std::string& name : selected) {
    const ProbeReport report = run_probe(name, config, setup, trained);
    out.write_json("probe_" + name + ".json", stamped_report(config, report));
    statuses[name] = to_string(report.status());
    table += report.to_table();
    failed = failed || report.status() == ProbeStatus::fail;
    inconclusive = inconclusive || report.status() == ProbeStatus::inconclusive;
  }
  summary["probes"] = statuses;
  out.write_json("probe_summary.json", summary);
  result.exit_code = failed ? kExitCheckFailed : (inconclusive ? kExitInconclusive : kExitOk);
  summary["table"] = table;
  result.summary = summary;
  result.artifacts = out.written;
  return result;
}

CommandResult run_verify(const ExperimentConfig& config) {
  const ProbeReport report = verify_suite(config);
  Outputs out(config.out_dir);
  out.write_json("verify.json", stamped_report(config, report));
  CommandResult result;
  result.summary = json_of_stamp(config);
  result.summary["command"] = "verify";
  result.summary["status"] = to_string(report.status());
  result.summary["table"] = report.to_table();
  result.exit_code = exit_code_for(report.status());
  result.artifacts = out.written;
  return result;
}

CommandResult run_sweep(const ExperimentConfig& config) {
  std::vector<std::size_t> grid = config.m_grid;
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  const GradientBoundSetup g{config.n, config.k, config.L, config.d, config.b,
                             config.delta_min, config.seed, config.replicates};

  // One job per width; each writes only its own slot.
  std::vector<std::vector<GradientBoundSample>> rows(grid.size());
  std::vector<std::exception_ptr> errors(grid.size());
  const std::size_t workers = worker_threads(grid.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t j = w; j < grid.size(); j += workers) {
        try {
          rows[j] = gradient_bound_samples(g, grid[j]);
        } catch (...) {
          errors[j] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::vector<GradientBoundSample> all;
  for (const auto& r : rows) all.insert(all.end(), r.begin(), r.end());
  const ProbeReport report = gradient_bound_report(g, all);

  static const char* columns[] = {"grad_w_sq", "grad_theta_sq", "losstilde_sq", "losshat_sq", "r_w", "r_theta"};
  std::string csv = "m,grad_w_sq,grad_theta_sq,losstilde_sq,losshat_sq,r_w,r_theta\n";
  std::vector<std::vector<double>> values(std::size(columns));
  std::vector<double> widths;
  for (std::size_t m : grid) {
    csv += std::to_string(m);
    widths.push_back(static_cast<double>(m));
    for (std::size_t c = 0; c < std::size(columns); ++c) {
      const double v = report.scalar("m" + std::to_string(m) + "." + columns[c]);
      values[c].push_back(v);
      csv += "," + detail::format_double(v);
    }
    csv += "\n";
  }
  std::string slope_row = "slope", r2_row = "r2";
  for (const auto& col : values) {
    const LinearFit f = fit_loglog(widths, col);
    slope_row += "," + detail::format_double(f.slope);
    r2_row += "," + detail::format_double(f.r2);
  }
  csv += slope_row + "\n" + r2_row + "\n";

  Outputs out(config.out_dir);
  out.write("sweep.csv", csv);
  out.write_json("sweep.json", stamped_report(config, report));
  CommandResult result;
  result.summary = json_of_stamp(config);
  result.summary["command"] = "sweep";
  result.summary["status"] = to_string(report.status());
  result.summary["workers"] = workers;
  result.summary["table"] = report.to_table();
  result.exit_code = exit_code_for(report.status());
  result.artifacts = out.written;
  return result;
}

}  // namespace

namespace {

// Same error class, longer message.
[[noreturn]] void rethrow_with_context(const Error& e, const std::string& what) {
  switch (e.code()) {
    case ErrorCode::shape: throw ShapeError(what);
    case ErrorCode::index: throw IndexError(what);
    case ErrorCode::enumeration: throw EnumerationError(what);
    case ErrorCode::evaluation: throw EvaluationError(what);
    case ErrorCode::parse: throw ParseError(what);
    case ErrorCode::io: throw IoError(what);
    case ErrorCode::probe: throw ProbeError(what);
    case ErrorCode::invalid_argument: throw InvalidArgument(what);
    default: throw Error(e.code(), what);
  }
}

}  // namespace

CommandResult run_command(const std::string& command, const ExperimentConfig& config) {
  try {
    config.validate();
    if (command == "train") return run_train(config);
    if (command == "verify") return run_verify(config);
    if (command == "probe") return run_probes(config);
    if (command == "sweep") return run_sweep(config);
  } catch (const DivergenceError& e) {
    throw DivergenceError(command + " (" + describe(config) + "): " + e.what(), e.partial_trace());
  } catch (const GenerationError& e) {
    throw GenerationError(command + " (" + describe(config) + "): " + e.what(), e.attempts());
  } catch (const ConvergenceError& e) {
    throw ConvergenceError(command + " (" + describe(config) + "): " + e.what(), e.last_estimates(), e.steps());
  } catch (const Error& e) {
    rethrow_with_context(e, command + " (" + describe(config) + "): " + e.what());
  }
  throw InvalidArgument("unknown command '" + command + "' (expected train, verify, probe or sweep)");
}

}  // namespace clab
