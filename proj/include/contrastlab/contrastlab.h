/* C interface to the contrastive-learning lab.
 *
 * Every object is an opaque handle owned by the caller and released with the
 * matching *_free function. Functions return a clab_status; on any error the
 * message is available from clab_last_error() on the same thread until the
 * next call. Strings returned through char** are released with
 * clab_string_free. */
#ifndef CONTRASTLAB_H
#define CONTRASTLAB_H

#include <stddef.h>
#include <stdint.h>

#if defined(CONTRASTLAB_BUILDING)
#define CLAB_API __attribute__((visibility("default")))
#else
#define CLAB_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum clab_status {
  CLAB_OK = 0,
  CLAB_CHECK_FAILED = 1, /* a probe or verification check failed */
  CLAB_INCONCLUSIVE = 2, /* a fit was too poor to decide a check */

  CLAB_ERR_INVALID_ARGUMENT = 10,
  CLAB_ERR_SHAPE = 11,
  CLAB_ERR_INDEX = 12,
  CLAB_ERR_CONVERGENCE = 13,
  CLAB_ERR_GENERATION = 14,
  CLAB_ERR_ENUMERATION = 15,
  CLAB_ERR_EVALUATION = 16,
  CLAB_ERR_DIVERGENCE = 17,
  CLAB_ERR_PARSE = 18,
  CLAB_ERR_IO = 19,
  CLAB_ERR_PROBE = 20,
  CLAB_ERR_NULL_ARGUMENT = 21,
  CLAB_ERR_INTERNAL = 22
} clab_status;

typedef struct clab_config clab_config;
typedef struct clab_dataset clab_dataset;
typedef struct clab_params clab_params;

CLAB_API const char* clab_version(void);
CLAB_API const char* clab_last_error(void);
CLAB_API const char* clab_status_name(clab_status status);
CLAB_API void clab_string_free(char* text);

/* Experiment configuration (JSON). */
CLAB_API clab_status clab_config_parse(const char* json, clab_config** out);
CLAB_API clab_status clab_config_load(const char* path, clab_config** out);
CLAB_API clab_status clab_config_to_json(const clab_config* config, char** out);
CLAB_API clab_status clab_config_set_seed(clab_config* config, uint64_t seed);
CLAB_API clab_status clab_config_set_out_dir(clab_config* config, const char* dir);
/* Comma-separated probe names; an empty string selects every probe. */
CLAB_API clab_status clab_config_set_probes(clab_config* config, const char* names);
CLAB_API clab_status clab_config_set_m_grid(clab_config* config, const size_t* widths, size_t count);
CLAB_API clab_status clab_config_set_T(clab_config* config, size_t T);
CLAB_API void clab_config_free(clab_config* config);

/* Runs "train", "verify", "probe" or "sweep". Returns CLAB_OK,
 * CLAB_CHECK_FAILED or CLAB_INCONCLUSIVE when the command ran; the summary
 * (JSON) is stored in *summary when summary is not NULL. */
CLAB_API clab_status clab_run(const clab_config* config, const char* command, char** summary);

/* Datasets. */
CLAB_API clab_status clab_dataset_generate(uint64_t seed, size_t n, size_t b, double delta_min,
                                           clab_dataset** out);
CLAB_API clab_status clab_dataset_from_json(const char* json, clab_dataset** out);
CLAB_API clab_status clab_dataset_to_json(const clab_dataset* data, char** out);
CLAB_API clab_status clab_dataset_info(const clab_dataset* data, size_t* n, size_t* b, double* delta);
CLAB_API void clab_dataset_free(clab_dataset* data);

/* Encoder parameters. */
CLAB_API clab_status clab_params_init(uint64_t seed, const char* label, size_t L, size_t m, size_t d,
                                      size_t b, clab_params** out);
CLAB_API clab_status clab_params_load(const char* path, clab_params** out);
CLAB_API clab_status clab_params_save(const clab_params* params, const char* path);
CLAB_API clab_status clab_params_shape(const clab_params* params, size_t* L, size_t* m, size_t* d,
                                       size_t* b);
CLAB_API void clab_params_free(clab_params* params);

/* f(x) for one input of length b into out of length d. */
CLAB_API clab_status clab_forward(const clab_params* params, const double* x, size_t b, double* out,
                                  size_t d);
/* Exact expected contrastive loss over all k-subsets of negatives. */
CLAB_API clab_status clab_total_loss(const clab_params* query, const clab_params* key,
                                     const clab_dataset* data, size_t k, double* out);

#ifdef __cplusplus
}
#endif

#endif
