#include "contrastlab/contrastlab.h"

#include <cstring>
#include <new>
#include <sstream>
#include <string>

#include "contrastlab/error.hpp"
#include "contrastlab/experiment.hpp"

struct clab_config {
  clab::ExperimentConfig value;
};

struct clab_dataset {
  clab::Dataset value;
};

struct clab_params {
  clab::Params value;
};

namespace {

thread_local std::string last_error;

clab_status status_of(clab::ErrorCode code) {
  switch (code) {
    case clab::ErrorCode::shape: return CLAB_ERR_SHAPE;
    case clab::ErrorCode::index: return CLAB_ERR_INDEX;
    case clab::ErrorCode::convergence: return CLAB_ERR_CONVERGENCE;
    case clab::ErrorCode::generation: return CLAB_ERR_GENERATION;
    case clab::ErrorCode::enumeration: return CLAB_ERR_ENUMERATION;
    case clab::ErrorCode::evaluation: return CLAB_ERR_EVALUATION;
    case clab::ErrorCode::divergence: return CLAB_ERR_DIVERGENCE;
    case clab::ErrorCode::parse: return CLAB_ERR_PARSE;
    case clab::ErrorCode::io: return CLAB_ERR_IO;
    case clab::ErrorCode::probe: return CLAB_ERR_PROBE;
    case clab::ErrorCode::invalid_argument: return CLAB_ERR_INVALID_ARGUMENT;
  }
  return CLAB_ERR_INTERNAL;
}

// Runs body, translating every exception into a status and a message.
template <typename Body>
clab_status guarded(Body&& body) {
  last_error.clear();
  try {
    return body();
  } catch (const clab::Error& e) {
    last_error = e.what();
    return status_of(e.code());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return CLAB_ERR_INTERNAL;
  } catch (const std::exception& e) {
    last_error = e.what();
    return CLAB_ERR_INTERNAL;
  } catch (...) {
    last_error = "unknown error";
    return CLAB_ERR_INTERNAL;
  }
}

clab_status null_argument(const char* name) {
  last_error = std::string("argument '") + name + "' is NULL";
  return CLAB_ERR_NULL_ARGUMENT;
}

char* copy_string(const std::string& text) {
  char* out = new char[text.size() + 1];
  std::memcpy(out, text.c_str(), text.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* clab_version(void) { return clab::version_string(); }

const char* clab_last_error(void) { return last_error.c_str(); }

const char* clab_status_name(clab_status status) {
  switch (status) {
    case CLAB_OK: return "ok";
    case CLAB_CHECK_FAILED: return "check_failed";
    case CLAB_INCONCLUSIVE: return "inconclusive";
    case CLAB_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case CLAB_ERR_SHAPE: return "shape";
    case CLAB_ERR_INDEX: return "index";
    case CLAB_ERR_CONVERGENCE: return "convergence";
    case CLAB_ERR_GENERATION: return "generation";
    case CLAB_ERR_ENUMERATION: return "enumeration";
    case CLAB_ERR_EVALUATION: return "evaluation";
    case CLAB_ERR_DIVERGENCE: return "divergence";
    case CLAB_ERR_PARSE: return "parse";
    case CLAB_ERR_IO: return "io";
    case CLAB_ERR_PROBE: return "probe";
    case CLAB_ERR_NULL_ARGUMENT: return "null_argument";
    case CLAB_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

void clab_string_free(char* text) { delete[] text; }

clab_status clab_config_parse(const char* json, clab_config** out) {
  if (!json) return null_argument("json");
  if (!out) return null_argument("out");
  return guarded([&] {
    *out = new clab_config{clab::ExperimentConfig::parse(json)};
    return CLAB_OK;
  });
}

clab_status clab_config_load(const char* path, clab_config** out) {
  if (!path) return null_argument("path");
  if (!out) return null_argument("out");
  return guarded([&] {
    *out = new clab_config{clab::ExperimentConfig::load(path)};
    return CLAB_OK;
  });
}

clab_status clab_config_to_json(const clab_config* config, char** out) {
  if (!config) return null_argument("config");
  if (!out) return null_argument("out");
  return guarded([&] {
    *out = copy_string(config->value.serialize());
    return CLAB_OK;
  });
}

clab_status clab_config_set_seed(clab_config* config, uint64_t seed) {
  if (!config) return null_argument("config");
  config->value.seed = seed;
  return CLAB_OK;
}

clab_status clab_config_set_out_dir(clab_config* config, const char* dir) {
  if (!config) return null_argument("config");
  if (!dir) return null_argument("dir");
  return guarded([&] {
    clab::ExperimentConfig next = config->value;
    next.out_dir = dir;
    next.validate();
    config->value = std::move(next);
    return CLAB_OK;
  });
}

clab_status clab_config_set_probes(clab_config* config, const char* names) {
  if (!config) return null_argument("config");
  if (!names) return null_argument("names");
  return guarded([&] {
    clab::ExperimentConfig next = config->value;
    next.probes.clear();
    std::stringstream list(names);
    std::string item;
    while (std::getline(list, item, ',')) {
      if (!item.empty()) next.probes.push_back(item);
    }
    next.validate();
    config->value = std::move(next);
    return CLAB_OK;
  });
}

clab_status clab_config_set_m_grid(clab_config* config, const size_t* widths, size_t count) {
  if (!config) return null_argument("config");
  if (!widths && count > 0) return null_argument("widths");
  return guarded([&] {
    clab::ExperimentConfig next = config->value;
    next.m_grid.assign(widths, widths + count);
    next.validate();
    config->value = std::move(next);
    return CLAB_OK;
  });
}

clab_status clab_config_set_T(clab_config* config, size_t T) {
  if (!config) return null_argument("config");
  return guarded([&] {
    clab::ExperimentConfig next = config->value;
    next.T = T;
    next.validate();
    config->value = std::move(next);
    return CLAB_OK;
  });
}

void clab_config_free(clab_config* config) { delete config; }

clab_status clab_run(const clab_config* config, const char* command, char** summary) {
  if (!config) return null_argument("config");
  if (!command) return null_argument("command");
  return guarded([&] {
    const clab::CommandResult result = clab::run_command(command, config->value);
    if (summary) *summary = copy_string(result.summary.dump(2));
    switch (result.exit_code) {
      case clab::kExitOk: return CLAB_OK;
      case clab::kExitCheckFailed: return CLAB_CHECK_FAILED;
      case clab::kExitInconclusive: return CLAB_INCONCLUSIVE;
      default: return CLAB_ERR_INTERNAL;
    }
  });
}

clab_status clab_dataset_generate(uint64_t seed, size_t n, size_t b, double delta_min,
                                  clab_dataset** out) {
  if (!out) return null_argument("out");
  return guarded([&] {
    clab::Rng rng = clab::Rng(seed).child("data");
    *out = new clab_dataset{clab::generate_separated(rng, n, b, delta_min)};
    return CLAB_OK;
  });
}

clab_status clab_dataset_from_json(const char* json, clab_dataset** out) {
  if (!json) return null_argument("json");
  if (!out) return null_argument("out");
  return guarded([&] {
    *out = new clab_dataset{clab::dataset_from_json(json)};
    return CLAB_OK;
  });
}

clab_status clab_dataset_to_json(const clab_dataset* data, char** out) {
  if (!data) return null_argument("data");
  if (!out) return null_argument("out");
  return guarded([&] {
    *out = copy_string(clab::dataset_to_json(data->value));
    return CLAB_OK;
  });
}

clab_status clab_dataset_info(const clab_dataset* data, size_t* n, size_t* b, double* delta) {
  if (!data) return null_argument("data");
  if (n) *n = data->value.n();
  if (b) *b = data->value.b();
  if (delta) *delta = data->value.delta;
  return CLAB_OK;
}

void clab_dataset_free(clab_dataset* data) { delete data; }

clab_status clab_params_init(uint64_t seed, const char* label, size_t L, size_t m, size_t d, size_t b,
                             clab_params** out) {
  if (!label) return null_argument("label");
  if (!out) return null_argument("out");
  return guarded([&] {
    clab::Rng rng = clab::Rng(seed).child(label);
    clab::Params p = clab::init_params(rng, clab::Shape{L, m, d, b});
    p.provenance.label = label;
    *out = new clab_params{std::move(p)};
    return CLAB_OK;
  });
}

clab_status clab_params_load(const char* path, clab_params** out) {
  if (!path) return null_argument("path");
  if (!out) return null_argument("out");
  return guarded([&] {
    *out = new clab_params{clab::load_params(path)};
    return CLAB_OK;
  });
}

clab_status clab_params_save(const clab_params* params, const char* path) {
  if (!params) return null_argument("params");
  if (!path) return null_argument("path");
  return guarded([&] {
    clab::save_params(params->value, path);
    return CLAB_OK;
  });
}

clab_status clab_params_shape(const clab_params* params, size_t* L, size_t* m, size_t* d, size_t* b) {
  if (!params) return null_argument("params");
  const clab::Shape& s = params->value.shape;
  if (L) *L = s.L;
  if (m) *m = s.m;
  if (d) *d = s.d;
  if (b) *b = s.b;
  return CLAB_OK;
}

void clab_params_free(clab_params* params) { delete params; }

clab_status clab_forward(const clab_params* params, const double* x, size_t b, double* out, size_t d) {
  if (!params) return null_argument("params");
  if (!x) return null_argument("x");
  if (!out) return null_argument("out");
  return guarded([&] {
    const clab::Shape& s = params->value.shape;
    if (b != s.b || d != s.d) {
      throw clab::ShapeError("clab_forward: buffers must have length b=" + std::to_string(s.b) +
                             " and d=" + std::to_string(s.d));
    }
    const clab::Vector input = Eigen::Map<const clab::Vector>(x, static_cast<clab::Index>(b));
    const clab::Vector f = clab::forward(params->value, input);
    std::memcpy(out, f.data(), d * sizeof(double));
    return CLAB_OK;
  });
}

clab_status clab_total_loss(const clab_params* query, const clab_params* key, const clab_dataset* data,
                            size_t k, double* out) {
  if (!query) return null_argument("query");
  if (!key) return null_argument("key");
  if (!data) return null_argument("data");
  if (!out) return null_argument("out");
  return guarded([&] {
    *out = clab::total_loss_exact(clab::encode(query->value, key->value, data->value), k);
    return CLAB_OK;
  });
}

}  // extern "C"
