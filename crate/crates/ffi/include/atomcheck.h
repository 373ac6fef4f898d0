#ifndef ATOMCHECK_H
#define ATOMCHECK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum AcStatus {
  AC_STATUS_OK = 0,
  AC_STATUS_NULL_POINTER = 1,
  AC_STATUS_INVALID_UTF8 = 2,
  AC_STATUS_INVALID_ARGUMENT = 3,
  AC_STATUS_CONFIG = 4,
  AC_STATUS_PIPELINE = 5,
  AC_STATUS_PANIC = 6,
} AcStatus;

/**
 * Fact-level gate outcome.
 */
typedef enum AcFactLabel {
  AC_FACT_LABEL_REFUTED = 0,
  AC_FACT_LABEL_UNCERTAIN = 1,
  AC_FACT_LABEL_SUPPORTED = 2,
} AcFactLabel;

/**
 * A configured pipeline plus its providers. Opaque to C.
 */
typedef struct AcEngine AcEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates an engine from a JSON config (same format as the CLI's config
 * file). A null `config_json` selects the offline defaults. Relative paths
 * in the config resolve against the current working directory.
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be a
 * valid pointer. On success `*out` owns an engine to be released with
 * [`ac_engine_free`].
 */
enum AcStatus ac_engine_new(const char *config_json, struct AcEngine **out);

/**
 * Releases an engine. Null is a no-op.
 *
 * # Safety
 * `engine` must be null or a pointer from [`ac_engine_new`] not yet freed.
 */
void ac_engine_free(struct AcEngine *engine);

/**
 * Verifies `claim` against `document`; `*out_json` receives the verdict
 * trace as JSON.
 *
 * # Safety
 * `engine` must come from [`ac_engine_new`]; `claim` and `document` must be
 * NUL-terminated; `out_json` must be valid. The engine may be shared across
 * threads.
 */
enum AcStatus ac_engine_verify(const struct AcEngine *engine,
                               const char *claim,
                               const char *document,
                               char **out_json);

/**
 * Gates a support probability against the band `(lo, hi)`.
 *
 * # Safety
 * `out_label` must be a valid pointer.
 */
enum AcStatus ac_gate(double p, double lo, double hi, enum AcFactLabel *out_label);

/**
 * Computes metrics from `{"pairs": [[gold, predicted], ...], "task"?, "nei_policy"?}`
 * where labels are `"Supported"`, `"Refuted"` or `"NEI"`; `*out_json`
 * receives the metrics report.
 *
 * # Safety
 * `request_json` must be NUL-terminated; `out_json` must be valid.
 */
enum AcStatus ac_metrics_from_pairs(const char *request_json, char **out_json);

/**
 * Releases a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void ac_string_free(char *s);

/**
 * Message for the last failed call on this thread, or null after a
 * success. Valid until the next call into the library on this thread;
 * do not free.
 */
const char *ac_last_error_message(void);

/**
 * Library version; static, do not free.
 */
const char *ac_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATOMCHECK_H */
