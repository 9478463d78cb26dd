#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "contrastlab/error.hpp"
#include "contrastlab/experiment.hpp"

using namespace clab;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"({"n":5,"k":2,"L":2,"m":32,"d":4,"b":6,"seed":3,"T":4})";

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("contrastlab_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<double> fields(const std::string& line) {
  std::vector<double> out;
  std::istringstream in(line);
  for (std::string cell; std::getline(in, cell, ',');) out.push_back(std::stod(cell));
  return out;
}

std::string parse_error(const std::string& text) {
  try {
    ExperimentConfig::parse(text);
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, MinimalDocumentTakesDefaults) {
  const ExperimentConfig c = ExperimentConfig::parse(R"({"n":8,"k":2,"L":3,"m":512,"d":32,"b":16,"seed":1})");
  EXPECT_EQ(c.n, 8u);
  EXPECT_EQ(c.step_mode, StepMode::practical);
  EXPECT_FALSE(c.T.has_value());
  EXPECT_EQ(c.delta_min, 0.5);
  EXPECT_EQ(c.out_dir, "out");
  const HyperParams hp = c.hyperparams(0.7);
  EXPECT_EQ(hp.eta, 0.5 * 32.0 / 512.0);
  EXPECT_EQ(hp.gamma, hp.eta);
  EXPECT_EQ(hp.T, 200u);
  EXPECT_EQ(hp.k, 2u);
}

TEST(Config, SerializeRoundTrips) {
  ExperimentConfig c = ExperimentConfig::parse(kSmall);
  c.eta = 0.01;
  c.probes = {"init", "descent"};
  c.m_grid = {16, 32};
  c.early_stop = true;
  EXPECT_EQ(ExperimentConfig::parse(c.serialize()), c);
}

TEST(Config, RejectsInvariantViolationsWithTheFieldName) {
  EXPECT_EQ(parse_error(R"({"n":8,"k":9,"L":3,"m":512,"d":32,"b":16,"seed":1})"), "config: k must be ≤ n−1");
  EXPECT_EQ(parse_error(R"({"n":8,"k":2,"L":3,"m":512,"d":32,"b":16,"seed":1,"T":0})"), "config: T must be ≥ 1");
  EXPECT_EQ(parse_error(R"({"n":8,"k":2,"L":3,"m":512,"d":32,"b":16,"seed":1,"x":1})"),
            "config: unknown field 'x'");
  EXPECT_EQ(parse_error(R"({"n":8,"k":2,"L":3,"m":512,"d":32,"b":16})"),
            "config: missing required field 'seed'");
  EXPECT_EQ(parse_error(R"({"n":8,"k":2,"L":3,"m":512,"d":32,"b":16,"seed":-1})"),
            "config: field 'seed' must be a non-negative integer");
  EXPECT_NE(parse_error(R"({"n":8,"k":2,"L":3,"m":512,"d":32,"b":16,"seed":1,"probes":["nope"]})")
                .find("unknown probe 'nope'"),
            std::string::npos);
  EXPECT_NE(parse_error("[1,2]").find("JSON object"), std::string::npos);
  EXPECT_NE(parse_error("{").find("malformed JSON"), std::string::npos);
  EXPECT_NE(parse_error(R"({"n":8,"k":2,"L":3,"m":512,"d":32,"b":16,"seed":1,"delta_min":2.0})"), "");
}

TEST(Config, TheoreticalHorizonNeedsExplicitTAtScale) {
  const std::string base = R"({"n":8,"k":2,"L":3,"m":512,"d":32,"b":16,"seed":1,"step_mode":"theoretical")";
  EXPECT_NE(parse_error(base + "}").find("set T explicitly"), std::string::npos);
  const ExperimentConfig c = ExperimentConfig::parse(base + R"(,"T":3})");
  const HyperParams hp = c.hyperparams(0.5);
  EXPECT_EQ(hp.T, 3u);
  EXPECT_EQ(hp.eta, theoretical_hyperparams(8, 2, 3, 512, 32, 0.5, 0.5).hp.eta);
  EXPECT_NE(parse_error(base + R"(,"T":3,"eta":0.1})").find("theoretical"), std::string::npos);
}

TEST(Config, LoadReportsMissingFile) {
  EXPECT_THROW(ExperimentConfig::load("/nonexistent/config.json"), IoError);
}

TEST(Setup, ChildStreamsAreIndependentOfEachOther) {
  ExperimentConfig a = ExperimentConfig::parse(kSmall);
  ExperimentConfig b = a;
  b.m = 64;
  const ExperimentSetup sa = make_setup(a), sb = make_setup(b);
  for (std::size_t i = 0; i < a.n; ++i) EXPECT_EQ(sa.data.points[i], sb.data.points[i]);
  EXPECT_NE(sa.query0.layers[0], sa.key0.layers[0]);
}

TEST(Trace, CsvLayout) {
  const ExperimentConfig c = ExperimentConfig::parse(kSmall);
  const ExperimentSetup s = make_setup(c);
  HyperParams hp = c.hyperparams(s.data.delta);
  hp.T = 1;
  const TrainResult r = train(s.query0, s.key0, s.data, hp);
  const auto rows = lines(trace_csv(r.trace));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0],
            "t,loss,losstilde_norm,losshat_norm,loss_vec_norm,grad_w_fro,grad_theta_fro,traj_w_fro,"
            "traj_theta_fro,step_ms");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto v = fields(rows[i]);
    ASSERT_EQ(v.size(), 10u);
    EXPECT_EQ(v[0], static_cast<double>(i - 1));
    EXPECT_NEAR(v[4], std::hypot(v[2], v[3]), 1e-14 * v[4]);
    EXPECT_EQ(v[9], 0.0);
  }
  // Seventeen significant digits reproduce the doubles exactly.
  EXPECT_EQ(fields(rows[1])[1], r.trace.records[0].loss);
  EXPECT_EQ(trace_csv(r.trace), trace_csv(train(s.query0, s.key0, s.data, hp).trace));

  const auto longrows = lines(trace_long_csv(r.trace));
  EXPECT_EQ(longrows[0], "t,metric,value");
  EXPECT_EQ(longrows.size(), 1u + 2u * 9u);
  EXPECT_EQ(longrows[1].rfind("0,loss,", 0), 0u);

  const fs::path dir = scratch("emit");
  fs::create_directories(dir);
  emit_trace(r.trace, (dir / "t.csv").string());
  EXPECT_EQ(slurp(dir / "t.csv"), trace_csv(r.trace));
  EXPECT_THROW(emit_trace(r.trace, (dir / "missing" / "t.csv").string()), IoError);
  fs::remove_all(dir);
}

TEST(Trace, LongFormatCarriesSpectralColumns) {
  TrainTrace trace;
  StepRecord r;
  r.traj_w_spectral = {1.0, 2.0};
  r.traj_theta_spectral = {3.0, 4.0};
  trace.records.push_back(r);
  const std::string text = trace_long_csv(trace);
  EXPECT_NE(text.find("0,traj_w_spectral_1,2\n"), std::string::npos);
  EXPECT_NE(text.find("0,traj_theta_spectral_0,3\n"), std::string::npos);
}

TEST(ExitCodes, FollowProbeStatus) {
  EXPECT_EQ(exit_code_for(ProbeStatus::pass), 0);
  EXPECT_EQ(exit_code_for(ProbeStatus::fail), 1);
  EXPECT_EQ(exit_code_for(ProbeStatus::inconclusive), 2);
  EXPECT_EQ(known_probes().size(), 7u);
}

TEST(RunCommand, TrainWritesEveryArtifact) {
  const fs::path dir = scratch("train");
  ExperimentConfig c = ExperimentConfig::parse(kSmall);
  c.out_dir = dir.string();
  const CommandResult r = run_command("train", c);
  EXPECT_EQ(r.exit_code, 0);
  for (const char* name : {"dataset.json", "trace.csv", "trace_long.csv", "query_params.bin", "key_params.bin",
                           "summary.json"}) {
    EXPECT_TRUE(fs::exists(dir / name)) << name;
  }
  EXPECT_EQ(r.artifacts.size(), 6u);
  EXPECT_EQ(r.summary["status"], "completed");
  EXPECT_EQ(r.summary["records"], 5u);
  EXPECT_EQ(r.summary["T"], 4u);
  EXPECT_EQ(r.summary["expectation"], "exact");
  EXPECT_EQ(r.summary["config"]["seed"], 3u);
  EXPECT_EQ(lines(slurp(dir / "trace.csv")).size(), 6u);

  const Params q = load_params((dir / "query_params.bin").string());
  EXPECT_EQ(q.shape, c.shape());

  // Reruns into the same directory reproduce every byte.
  std::vector<std::string> first;
  for (const auto& a : r.artifacts) first.push_back(slurp(a));
  const CommandResult again = run_command("train", c);
  for (std::size_t i = 0; i < again.artifacts.size(); ++i) EXPECT_EQ(slurp(again.artifacts[i]), first[i]) << i;
  fs::remove_all(dir);
}

TEST(RunCommand, DivergenceKeepsThePartialTrace) {
  const fs::path dir = scratch("diverge");
  ExperimentConfig c = ExperimentConfig::parse(kSmall);
  c.out_dir = dir.string();
  c.eta = c.gamma = 1e150;
  c.T = 50;
  EXPECT_THROW(run_command("train", c), DivergenceError);
  EXPECT_TRUE(fs::exists(dir / "trace.csv"));
  EXPECT_NE(slurp(dir / "summary.json").find("\"diverged\""), std::string::npos);
  fs::remove_all(dir);
}

TEST(RunCommand, VerifyPassesOnTheSmallConfig) {
  const fs::path dir = scratch("verify");
  ExperimentConfig c = ExperimentConfig::parse(kSmall);
  c.out_dir = dir.string();
  const CommandResult r = run_command("verify", c);
  EXPECT_EQ(r.exit_code, 0) << r.summary["table"].get<std::string>();
  EXPECT_TRUE(fs::exists(dir / "verify.json"));
  fs::remove_all(dir);
}

TEST(RunCommand, ProbeSubsetWritesOneReportEach) {
  const fs::path dir = scratch("probe");
  ExperimentConfig c = ExperimentConfig::parse(kSmall);
  c.out_dir = dir.string();
  c.probes = {"descent", "ce_smoothness"};
  const CommandResult r = run_command("probe", c);
  EXPECT_TRUE(fs::exists(dir / "probe_descent.json"));
  EXPECT_TRUE(fs::exists(dir / "probe_ce_smoothness.json"));
  EXPECT_FALSE(fs::exists(dir / "probe_init.json"));
  EXPECT_EQ(r.summary["probes"].size(), 2u);
  EXPECT_EQ(r.summary["probes"]["ce_smoothness"], "pass");
  fs::remove_all(dir);
}

TEST(RunCommand, SweepHasOneRowPerWidthAndFitRows) {
  const fs::path dir = scratch("sweep");
  ExperimentConfig c = ExperimentConfig::parse(kSmall);
  c.out_dir = dir.string();
  c.m_grid = {64, 16, 32, 32};
  c.replicates = 2;
  run_command("sweep", c);
  const auto rows = lines(slurp(dir / "sweep.csv"));
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], "m,grad_w_sq,grad_theta_sq,losstilde_sq,losshat_sq,r_w,r_theta");
  EXPECT_EQ(rows[1].rfind("16,", 0), 0u);
  EXPECT_EQ(rows[3].rfind("64,", 0), 0u);
  EXPECT_EQ(rows[4].rfind("slope,", 0), 0u);
  EXPECT_EQ(rows[5].rfind("r2,", 0), 0u);
  fs::remove_all(dir);
}

TEST(RunCommand, RejectsUnknownCommandsAndInvalidConfigs) {
  ExperimentConfig c = ExperimentConfig::parse(kSmall);
  EXPECT_THROW(run_command("dance", c), InvalidArgument);
  c.k = 7;
  try {
    run_command("train", c);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("train (n=5 k=7"), std::string::npos);
  }
}
