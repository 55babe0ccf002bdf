#ifndef COMETA_H
#define COMETA_H

/* Generated by cbindgen from cometa-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes of every fallible entry point.
typedef enum CometaStatus {
  COMETA_STATUS_OK = 0,
  COMETA_STATUS_NULL_ARGUMENT = 1,
  COMETA_STATUS_INVALID_UTF8 = 2,
  COMETA_STATUS_INVALID_CONFIG = 3,
  COMETA_STATUS_DATA_ERROR = 4,
  COMETA_STATUS_RUNTIME_ERROR = 5,
} CometaStatus;

// Interaction data behind the C API. Opaque to callers.
typedef struct CometaLog CometaLog;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; do not free.
const char *cometa_version(void);

// Message of the most recent error on this thread, or NULL. The caller
// frees the returned string with `cometa_string_free`.
char *cometa_last_error(void);

// Frees a string allocated by this library. NULL is ignored.
//
// # Safety
// `s` must be a pointer previously returned by this library and not yet
// freed.
void cometa_string_free(char *s);

// Generates a synthetic interaction log. `params_json` may be NULL or
// empty for the default generator settings.
//
// # Safety
// `params_json`, when non-NULL, must point to a NUL-terminated string;
// `out` must point to writable storage for one pointer.
enum CometaStatus cometa_log_synthetic(const char *params_json,
                                       uint64_t seed,
                                       struct CometaLog **out);

// Loads the three MovieLens-1M files.
//
// # Safety
// All path arguments must be NUL-terminated strings; `out` must point to
// writable storage for one pointer.
enum CometaStatus cometa_log_movielens(const char *ratings_path,
                                       const char *users_path,
                                       const char *movies_path,
                                       struct CometaLog **out);

// Loads a CSV file under a column-role schema document.
//
// # Safety
// `path` and `schema_json` must be NUL-terminated strings; `out` must
// point to writable storage for one pointer.
enum CometaStatus cometa_log_csv(const char *path, const char *schema_json, struct CometaLog **out);

// Releases a log handle. NULL is ignored.
//
// # Safety
// `log` must be a handle from one of the loaders, not yet freed.
void cometa_log_free(struct CometaLog *log);

// Basic counts of a log.
//
// # Safety
// `log` must be a live handle; out pointers, when non-NULL, must be
// writable.
enum CometaStatus cometa_log_stats(const struct CometaLog *log,
                                   uint64_t *users_out,
                                   uint64_t *items_out,
                                   uint64_t *records_out);

// Runs the staged cold/warm evaluation protocol on the given log and
// returns the report as a JSON string (free with `cometa_string_free`).
// `config_json` holds the split/model/seg/eval sections; NULL or empty
// uses the defaults.
//
// # Safety
// `log` must be a live handle; `config_json`, when non-NULL, must be a
// NUL-terminated string; `report_json_out` must be writable.
enum CometaStatus cometa_run_protocol(const struct CometaLog *log,
                                      const char *config_json,
                                      char **report_json_out);

// Area under the ROC curve with half-credit ties.
//
// # Safety
// `scores` and `labels` must point to `len` readable doubles; `out` must
// be writable.
enum CometaStatus cometa_auc(const double *scores,
                             const double *labels,
                             uintptr_t len,
                             double *out);

// Mean binary cross entropy.
//
// # Safety
// `scores` and `labels` must point to `len` readable doubles; `out` must
// be writable.
enum CometaStatus cometa_logloss(const double *scores,
                                 const double *labels,
                                 uintptr_t len,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMETA_H */
