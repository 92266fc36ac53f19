#ifndef M3F_M3F_H
#define M3F_M3F_H

/*
 * C interface to the m3f library. Every call returns an m3f_status; on
 * failure m3f_last_error() holds a message for the calling thread until its
 * next m3f call. Strings returned through `char**` are heap copies the caller
 * releases with m3f_string_free. Configurations and reports travel as JSON
 * text; unknown configuration keys are rejected.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define M3F_API __declspec(dllexport)
#else
#define M3F_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum m3f_status {
    M3F_OK = 0,
    M3F_ERR_DIMENSION = 1,
    M3F_ERR_VALIDATION = 2,
    M3F_ERR_PARSE = 3,
    M3F_ERR_USAGE = 4,
    M3F_ERR_CONFIGURATION = 5,
    M3F_ERR_EPISODE = 6,
    M3F_ERR_TEMPLATE = 7,
    M3F_ERR_LENGTH = 8,
    M3F_ERR_TRAINING = 9,
    M3F_ERR_IO = 10,
    M3F_ERR_ARGUMENT = 11, /* null handle or output pointer */
    M3F_ERR_INTERNAL = 12
} m3f_status;

typedef struct m3f_dataset m3f_dataset;
typedef struct m3f_model m3f_model; /* parameters, adapters and stage lineage */

M3F_API const char* m3f_version(void);
M3F_API const char* m3f_status_name(m3f_status status);
M3F_API const char* m3f_last_error(void);
M3F_API void m3f_string_free(char* s);

/* Default experiment configuration (train, baseline, arms, seeds). */
M3F_API m3f_status m3f_default_config(char** out_json);

/* Parses an experiment configuration and checks it against its dataset
 * without training; out_json echoes the normalized configuration. */
M3F_API m3f_status m3f_validate_config(const char* experiment_json, char** out_json);

/* Datasets. `spec_json` is a generator spec; `path` a records file or a
 * directory holding records.jsonl. */
M3F_API m3f_status m3f_dataset_generate(const char* spec_json, m3f_dataset** out);
M3F_API m3f_status m3f_dataset_load(const char* path, m3f_dataset** out);
/* The dataset an experiment configuration trains on. */
M3F_API m3f_status m3f_dataset_from_config(const char* experiment_json, m3f_dataset** out);
M3F_API m3f_status m3f_dataset_save(const m3f_dataset* ds, const char* dir);
/* Sample/class counts per modality, ingestion warnings and a content hash. */
M3F_API m3f_status m3f_dataset_describe(const m3f_dataset* ds, char** out_json);
/* `params_json`: {"n_way":..,"k_shot":..,"q_query":..}. Episode i uses a
 * seed derived from (seed, i). */
M3F_API m3f_status m3f_dataset_sample_episodes(const m3f_dataset* ds, const char* params_json, size_t count,
                                               uint64_t seed, char** out_json);
M3F_API void m3f_dataset_free(m3f_dataset* ds);

/* Models. */
M3F_API m3f_status m3f_model_init(const char* experiment_json, uint64_t seed, m3f_model** out);
M3F_API m3f_status m3f_model_load(const char* dir, m3f_model** out);
M3F_API m3f_status m3f_model_save(const m3f_model* model, const char* dir);
M3F_API m3f_status m3f_model_describe(const m3f_model* model, char** out_json);
/* Runs stage 1-4 of the pipeline as the experiment would for `seed`. Logs go
 * to <out_dir>/logs when out_dir is non-null. */
M3F_API m3f_status m3f_model_train_stage(m3f_model* model, const char* experiment_json, int stage, uint64_t seed,
                                         const char* out_dir, char** report_json);
/* Greedy description of sample `sample_id`; invalid UTF-8 comes back as \xNN. */
M3F_API m3f_status m3f_model_generate(const m3f_model* model, const m3f_dataset* ds, const char* sample_id,
                                      size_t max_new_tokens, char** out_text);
M3F_API void m3f_model_free(m3f_model* model);

/* Experiments. Reports are written to out_dir when it is non-null; progress
 * lines go to stderr when `progress` is nonzero. */
M3F_API m3f_status m3f_evaluate(const m3f_model* model, const char* experiment_json, uint64_t seed,
                                const char* out_dir, char** report_json);
M3F_API m3f_status m3f_run_experiment(const char* experiment_json, const char* out_dir, int progress,
                                      char** reports_json);
/* `ablation_json`: {"base": <experiment>, "axis": name, "values": [...]}. */
M3F_API m3f_status m3f_run_ablation(const char* ablation_json, const char* out_dir, int progress,
                                    char** result_json);
/* Summary table of <dir>/reports.jsonl. */
M3F_API m3f_status m3f_report_summary(const char* dir, char** out_text);

#ifdef __cplusplus
}
#endif

#endif
