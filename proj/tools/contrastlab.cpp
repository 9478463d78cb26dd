// Command-line front end. Talks to the library only through the C API.
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "contrastlab/contrastlab.h"

namespace {

// 0 pass, 1 check failed, 2 inconclusive, 3 config or usage error, 4 runtime error.
int exit_code(clab_status status) {
  switch (status) {
    case CLAB_OK: return 0;
    case CLAB_CHECK_FAILED: return 1;
    case CLAB_INCONCLUSIVE: return 2;
    case CLAB_ERR_PARSE:
    case CLAB_ERR_INVALID_ARGUMENT:
    case CLAB_ERR_NULL_ARGUMENT: return 3;
    default: return 4;
  }
}

int fail(clab_status status) {
  std::fprintf(stderr, "contrastlab: %s error: %s\n", clab_status_name(status), clab_last_error());
  return exit_code(status);
}

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> probes;
  std::vector<std::size_t> m_grid;
  bool json = false;
};

int run(const std::string& command, const Options& opt) {
  clab_config* config = nullptr;
  clab_status st = clab_config_load(opt.config.c_str(), &config);
  if (st != CLAB_OK) return fail(st);
  struct Guard {
    clab_config* c;
    ~Guard() { clab_config_free(c); }
  } guard{config};

  if (opt.seed && (st = clab_config_set_seed(config, *opt.seed)) != CLAB_OK) return fail(st);
  if (!opt.out.empty() && (st = clab_config_set_out_dir(config, opt.out.c_str())) != CLAB_OK) return fail(st);
  if (opt.probes && (st = clab_config_set_probes(config, opt.probes->c_str())) != CLAB_OK) return fail(st);
  if (!opt.m_grid.empty() &&
      (st = clab_config_set_m_grid(config, opt.m_grid.data(), opt.m_grid.size())) != CLAB_OK) {
    return fail(st);
  }

  char* summary = nullptr;
  st = clab_run(config, command.c_str(), &summary);
  if (st != CLAB_OK && st != CLAB_CHECK_FAILED && st != CLAB_INCONCLUSIVE) return fail(st);
  const auto doc = nlohmann::ordered_json::parse(summary);
  clab_string_free(summary);
  if (!opt.json && doc.contains("table")) {
    std::fputs(doc["table"].get<std::string>().c_str(), stdout);
  } else {
    auto shown = doc;
    shown.erase("table");
    std::puts(shown.dump(2).c_str());
  }
  if (st != CLAB_OK) std::fprintf(stderr, "contrastlab: %s\n", clab_status_name(st));
  return exit_code(st);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive-learning lab: training, oracle verification and scaling probes"};
  app.set_version_flag("--version", std::string(clab_version()));
  app.require_subcommand(1);

  Options opt;
  std::string probes;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "output directory (overrides out_dir)");
    sub->add_option("--seed", opt.seed, "seed (overrides the config)");
    sub->add_flag("--json", opt.json, "print the JSON summary instead of the table");
  };
  CLI::App* train = app.add_subcommand("train", "run gradient descent and write the trace");
  CLI::App* verify = app.add_subcommand("verify", "check closed forms against brute-force oracles");
  CLI::App* probe = app.add_subcommand("probe", "run the selected probes");
  CLI::App* sweep = app.add_subcommand("sweep", "gradient scaling table over a width grid");
  for (CLI::App* sub : {train, verify, probe, sweep}) add_common(sub);
  probe->add_option("--probes", opt.probes, "comma-separated probe names (default: all)");
  sweep->add_option("--m-grid", opt.m_grid, "widths, comma separated")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 3;
  }
  for (CLI::App* sub : {train, verify, probe, sweep}) {
    if (sub->parsed()) return run(sub->get_name(), opt);
  }
  return 3;
}
