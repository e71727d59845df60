#ifndef CROSSTUNE_H
#define CROSSTUNE_H

/* Generated from the crosstune-ffi crate sources; regenerate with cargo build. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a fallible call. Anything but `Ok` leaves a message in
 * `ct_last_error`.
 */
typedef enum CtStatus {
  CT_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  CT_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  CT_STATUS_INVALID_UTF8 = 2,
  /**
   * Task, label, or corpus problem.
   */
  CT_STATUS_TASK = 3,
  /**
   * Configuration problem.
   */
  CT_STATUS_CONFIG = 4,
  /**
   * Model or training failure.
   */
  CT_STATUS_RUNTIME = 5,
  /**
   * File IO failure.
   */
  CT_STATUS_IO = 6,
} CtStatus;

/**
 * A loaded classification task. Opaque.
 */
typedef struct CtTask CtTask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string. Never freed.
 */
const char *ct_version(void);

/**
 * Message for the calling thread's most recent failure; empty string when
 * the last call succeeded. Valid until this thread's next crosstune call.
 */
const char *ct_last_error(void);

/**
 * Releases a string returned by this library. NULL is a no-op.
 *
 * # Safety
 * `s` must have come from a crosstune call and not have been freed.
 */
void ct_string_free(char *s);

/**
 * Loads and validates a task spec from a JSON file. NULL on failure.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
struct CtTask *ct_task_load(const char *path);

/**
 * Parses and validates a task spec from a JSON string. NULL on failure.
 *
 * # Safety
 * `json` must be a NUL-terminated string.
 */
struct CtTask *ct_task_from_json(const char *json);

/**
 * Releases a task handle. NULL is a no-op.
 *
 * # Safety
 * `task` must have come from a `ct_task_*` constructor and not have been
 * freed.
 */
void ct_task_free(struct CtTask *task);

/**
 * Number of classes in the task's label space; 0 if `task` is NULL.
 *
 * # Safety
 * `task` must be a live handle or NULL.
 */
size_t ct_task_num_classes(const struct CtTask *task);

/**
 * Whether the task allows multiple labels per example; false if NULL.
 *
 * # Safety
 * `task` must be a live handle or NULL.
 */
bool ct_task_multi_label(const struct CtTask *task);

/**
 * Class name at `index` in label-space order, as a caller-owned string.
 * NULL when `task` is NULL or `index` is out of range.
 *
 * # Safety
 * `task` must be a live handle or NULL.
 */
char *ct_task_class_name(const struct CtTask *task, size_t index);

/**
 * Renders the zero-shot prompt for a query transcript under the task's
 * own class definitions. Caller owns the returned string; NULL on failure.
 *
 * # Safety
 * `task` must be a live handle; `query` a NUL-terminated string.
 */
char *ct_render_prompt(const struct CtTask *task, const char *query);

/**
 * Macro-averaged F1 of `preds` against `golds` over the task's label
 * space. Each of the `len` rows is a ", "-joined set of class names
 * (empty string for the empty set). Unknown class names are an error.
 *
 * # Safety
 * `task` must be a live handle; `golds` and `preds` must point to `len`
 * NUL-terminated strings each; `out` must be a valid f64 pointer.
 */
enum CtStatus ct_score_macro_f1(const struct CtTask *task,
                                const char *const *golds,
                                const char *const *preds,
                                size_t len,
                                double *out);

/**
 * Micro-averaged F1; same contract as `ct_score_macro_f1`.
 *
 * # Safety
 * Same contract as `ct_score_macro_f1`.
 */
enum CtStatus ct_score_micro_f1(const struct CtTask *task,
                                const char *const *golds,
                                const char *const *preds,
                                size_t len,
                                double *out);

/**
 * Generates the synthetic matched/mismatched task pair (task_a, task_b)
 * into `out_dir`: a task spec plus train/validation/eval corpora each.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string.
 */
enum CtStatus ct_synth_pair(uint64_t seed, size_t classes, const char *out_dir);

/**
 * Runs a full experiment matrix from a config file. On success,
 * `out_report` receives the caller-owned report text (markdown when
 * `markdown` is true, CSV otherwise). When `runs_path` is non-NULL, run
 * records are appended there as JSONL.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `runs_path` NULL or the
 * same; `out_report` a valid pointer slot.
 */
enum CtStatus ct_run_matrix(const char *config_path,
                            const char *runs_path,
                            bool markdown,
                            char **out_report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROSSTUNE_H */
