#ifndef PHYSNET_H
#define PHYSNET_H

/* C interface to the PhysNet library.
 *
 * Run-level calls take a JSON options document and, on success, hand back a
 * JSON result string that the caller releases with physnet_string_free.
 * Every call returns a status code; on failure physnet_last_error() holds a
 * message for the calling thread until its next call. */

#include <stddef.h>

#if defined(_WIN32)
#define PHYSNET_API __declspec(dllexport)
#else
#define PHYSNET_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
    PHYSNET_OK = 0,
    PHYSNET_ERR_USAGE = 1,   /* bad arguments, options or configuration */
    PHYSNET_ERR_RUNTIME = 2, /* I/O failure, divergence, missing files */
    PHYSNET_ERR_CHECK = 3    /* a self-check failed */
} physnet_status;

typedef struct physnet_dataset physnet_dataset;
typedef struct physnet_model physnet_model;

PHYSNET_API const char* physnet_version(void);
PHYSNET_API const char* physnet_last_error(void);
PHYSNET_API void physnet_string_free(char* s);

/* Runs. `result` may be NULL when the caller does not need the summary. */
PHYSNET_API physnet_status physnet_generate(const char* options_json, char** result);
PHYSNET_API physnet_status physnet_train(const char* options_json, char** result);
PHYSNET_API physnet_status physnet_evaluate(const char* options_json, char** result);
PHYSNET_API physnet_status physnet_ablate(const char* options_json, char** result);
/* Returns PHYSNET_ERR_CHECK (with the full report in `result`) when any
 * check fails. */
PHYSNET_API physnet_status physnet_check(const char* options_json, char** result);

/* Resolves a configuration: defaults, then the file (may be NULL), then the
 * overrides (JSON object, may be NULL). Result: {"config": ..., "config_hash": ...}. */
PHYSNET_API physnet_status physnet_resolve_config(const char* config_path, const char* overrides_json, char** result);

/* Datasets. */
PHYSNET_API physnet_status physnet_dataset_open(const char* dir, int verify, physnet_dataset** out);
PHYSNET_API void physnet_dataset_free(physnet_dataset* ds);
PHYSNET_API physnet_status physnet_dataset_info(const physnet_dataset* ds, size_t* n_samples, size_t* n_classes,
                                                size_t* image_size);
PHYSNET_API const char* physnet_dataset_checksum(const physnet_dataset* ds);

/* Models. */
PHYSNET_API physnet_status physnet_model_load(const char* checkpoint_dir, physnet_model** out);
PHYSNET_API void physnet_model_free(physnet_model* m);
PHYSNET_API physnet_status physnet_model_physical(const physnet_model* m, double* D, double* rho, double* K);
PHYSNET_API physnet_status physnet_model_shape(const physnet_model* m, size_t* image_size, size_t* tap_size,
                                               size_t* n_classes);
/* `pixels` holds n images of image_size^2 values in [0, 1]. Writes n labels
 * and, when `u` is not NULL, n * tap_size^2 density values. */
PHYSNET_API physnet_status physnet_model_predict(const physnet_model* m, const double* pixels, size_t n, int* labels,
                                                 double* u);
/* Evaluates the model on one split ("train", "val", "test") of an open
 * dataset; result is the metrics JSON. */
PHYSNET_API physnet_status physnet_model_evaluate(const physnet_model* m, const physnet_dataset* ds,
                                                  const char* split, char** result);

#ifdef __cplusplus
}
#endif

#endif
