#ifndef TRIPWIRE_H
#define TRIPWIRE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define TW_DETECT_OVERFLOW 1

#define TW_DETECT_UAF 2

#define TW_DETECT_LEAK 4

typedef enum TwStatus {
  TW_STATUS_OK = 0,
  TW_STATUS_NULL_POINTER = 1,
  TW_STATUS_INVALID_UTF8 = 2,
  TW_STATUS_PARSE_ERROR = 3,
  TW_STATUS_CONFIG_ERROR = 4,
  TW_STATUS_ENGINE_ERROR = 5,
  TW_STATUS_OUT_OF_RANGE = 6,
  TW_STATUS_PANIC = 7,
} TwStatus;

typedef enum TwReportKind {
  TW_REPORT_KIND_OVERFLOW = 0,
  TW_REPORT_KIND_USE_AFTER_FREE = 1,
  TW_REPORT_KIND_LEAK = 2,
  TW_REPORT_KIND_DOUBLE_FREE = 3,
  TW_REPORT_KIND_SEGFAULT = 4,
  TW_REPORT_KIND_REACHABLE_FREED = 5,
} TwReportKind;

typedef enum TwCallCategory {
  TW_CALL_CATEGORY_REPEATABLE = 0,
  TW_CALL_CATEGORY_RECORDABLE = 1,
  TW_CALL_CATEGORY_REVOCABLE = 2,
  TW_CALL_CATEGORY_DEFERRABLE = 3,
  TW_CALL_CATEGORY_IRREVOCABLE = 4,
} TwCallCategory;

/**
 * The result of running a trace.
 */
typedef struct TwOutcome TwOutcome;

/**
 * A parsed trace.
 */
typedef struct TwTrace TwTrace;

/**
 * Engine settings. Fill with `tw_config_default` before changing fields.
 */
typedef struct TwConfig {
  /**
   * Bitwise OR of `TW_DETECT_*`.
   */
  uint32_t detectors;
  uint64_t quarantine_max_bytes;
  uint64_t quarantine_max_count;
  uint64_t uaf_fill_prefix;
  uint8_t canary_byte;
  size_t max_watchpoints;
  bool dangling;
  uint64_t heap_base;
  uint64_t heap_size;
  uint64_t globals_base;
  uint64_t globals_words;
} TwConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *tw_last_error(void);

/**
 * # Safety
 * `out` must be NULL or point to writable memory for a `TwConfig`.
 */
enum TwStatus tw_config_default(struct TwConfig *out);

/**
 * Parses trace text. On success `*out` receives a handle to release with
 * `tw_trace_free`.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TwStatus tw_trace_parse(const char *text, struct TwTrace **out);

/**
 * # Safety
 * `trace` must be NULL or a live handle from `tw_trace_parse`.
 */
size_t tw_trace_event_count(const struct TwTrace *trace);

/**
 * # Safety
 * `trace` must be NULL or a handle from `tw_trace_parse` not yet freed.
 */
void tw_trace_free(struct TwTrace *trace);

/**
 * Runs a trace. A NULL `config` uses the defaults. On success `*out`
 * receives a handle to release with `tw_outcome_free`.
 *
 * # Safety
 * `trace` must be a live trace handle, `config` NULL or valid, `out` valid.
 */
enum TwStatus tw_run(const struct TwTrace *trace,
                     const struct TwConfig *config,
                     struct TwOutcome **out);

/**
 * # Safety
 * `outcome` must be NULL or a handle from `tw_run` not yet freed.
 */
void tw_outcome_free(struct TwOutcome *outcome);

/**
 * # Safety
 * `outcome` must be NULL or a live outcome handle.
 */
size_t tw_outcome_report_count(const struct TwOutcome *outcome);

/**
 * # Safety
 * `outcome` must be NULL or a live outcome handle.
 */
size_t tw_outcome_epochs(const struct TwOutcome *outcome);

/**
 * # Safety
 * `outcome` must be a live outcome handle and `out` valid.
 */
enum TwStatus tw_outcome_report_kind(const struct TwOutcome *outcome,
                                     size_t index,
                                     enum TwReportKind *out);

/**
 * Copies the 32-byte final state hash into `out`.
 *
 * # Safety
 * `outcome` must be a live outcome handle and `out` point to 32 bytes.
 */
enum TwStatus tw_outcome_state_hash(const struct TwOutcome *outcome, uint8_t *out);

/**
 * Human-readable report listing, or NULL for a NULL handle.
 *
 * # Safety
 * `outcome` must be NULL or a live outcome handle.
 */
char *tw_outcome_text(const struct TwOutcome *outcome);

/**
 * JSON document with reports, configuration, epoch count and state hash.
 *
 * # Safety
 * `outcome` must be NULL or a live outcome handle.
 */
char *tw_outcome_json(const struct TwOutcome *outcome);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library not yet freed.
 */
void tw_string_free(char *s);

/**
 * Category of an external call with the given arguments.
 *
 * # Safety
 * `name` must be a NUL-terminated string, `args` NULL (with `nargs` 0) or
 * an array of `nargs` NUL-terminated strings, and `out` valid.
 */
enum TwStatus tw_classify_call(const char *name,
                               const char *const *args,
                               size_t nargs,
                               enum TwCallCategory *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRIPWIRE_H */
