#ifndef SVMCHECK_H
#define SVMCHECK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SvmStatus {
  SVM_STATUS_OK = 0,
  SVM_STATUS_NULL_ARGUMENT = 1,
  SVM_STATUS_INVALID_UTF8 = 2,
  SVM_STATUS_PARSE_ERROR = 3,
  SVM_STATUS_UNKNOWN_MODEL = 4,
  SVM_STATUS_ENGINE_ERROR = 5,
  SVM_STATUS_PANIC = 6,
} SvmStatus;

typedef struct SvmModel SvmModel;

typedef struct SvmReport SvmReport;

/**
 * Search limits. `sessions == 0` keeps the model's own session count;
 * `workers == 0` uses one thread per core.
 */
typedef struct SvmLimits {
  size_t max_states;
  size_t max_depth;
  uint32_t sessions;
  size_t fab_depth;
  size_t workers;
} SvmLimits;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

struct SvmLimits svm_limits_default(void);

/**
 * Parses model text. On success `*out` holds a new model.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SvmStatus svm_model_parse(const char *text, struct SvmModel **out);

/**
 * Loads a bundled model by name.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SvmStatus svm_model_load_corpus(const char *name, struct SvmModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void svm_model_free(struct SvmModel *model);

/**
 * Model name as a new string, or null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
char *svm_model_name(const struct SvmModel *model);

/**
 * Verifies a model. `limits` may be null for defaults.
 *
 * # Safety
 * `model` must be a live handle, `limits` null or valid, `out` writable.
 */
enum SvmStatus svm_verify(const struct SvmModel *model,
                          const struct SvmLimits *limits,
                          struct SvmReport **out);

/**
 * 0 pass, 1 fail, 2 inconclusive, -1 for a null report.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
int32_t svm_report_verdict(const struct SvmReport *report);

/**
 * Number of reachable states explored, 0 for a null report.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
size_t svm_report_states(const struct SvmReport *report);

/**
 * The report as JSON, or null.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
char *svm_report_json(const struct SvmReport *report);

/**
 * The report as human-readable text, or null.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
char *svm_report_text(const struct SvmReport *report);

/**
 * # Safety
 * `report` must be null or a handle from this library not yet freed.
 */
void svm_report_free(struct SvmReport *report);

/**
 * Copy of the last error message on this thread, or null if the last call
 * succeeded.
 */
char *svm_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library not yet freed.
 */
void svm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SVMCHECK_H */
