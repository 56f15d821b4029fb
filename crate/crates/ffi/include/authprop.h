#ifndef AUTHPROP_H
#define AUTHPROP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ApMode {
  AP_MODE_COMPLIANT = 0,
  AP_MODE_LEGACY = 1,
} ApMode;

typedef enum ApPolicy {
  AP_POLICY_INITIATION = 0,
  AP_POLICY_ACCESS = 1,
  AP_POLICY_COMPLETION = 2,
} ApPolicy;

typedef enum ApRunStatus {
  AP_RUN_STATUS_COMPLETED = 0,
  AP_RUN_STATUS_COMPLETED_PARTIAL = 1,
  AP_RUN_STATUS_DENIED = 2,
} ApRunStatus;

typedef enum ApStatus {
  AP_STATUS_OK = 0,
  AP_STATUS_NULL_ARGUMENT = 1,
  AP_STATUS_INVALID_UTF8 = 2,
  AP_STATUS_INVALID_SCENARIO = 3,
  AP_STATUS_MISSING_POLICY = 4,
  AP_STATUS_EXECUTION_ERROR = 5,
  AP_STATUS_INTEGRITY_FAILURE = 6,
  AP_STATUS_BAD_ORIGIN = 7,
  AP_STATUS_INVALID_ARGUMENT = 8,
  AP_STATUS_PANIC = 99,
} ApStatus;

/**
 * Opaque parsed scenario.
 */
typedef struct ApScenario ApScenario;

/**
 * Opaque workflow trace.
 */
typedef struct ApTrace ApTrace;

typedef struct ApOutcome {
  enum ApRunStatus status;
  uint64_t accesses_allowed;
  uint64_t accesses_denied;
  uint64_t deliveries;
  uint64_t records;
} ApOutcome;

typedef struct ApRaceMetrics {
  uint64_t unauthorized_ops_ttl;
  uint64_t unauthorized_ops_exec;
  /**
   * Negative when the execution-count lane admitted nothing.
   */
  double ratio;
} ApRaceMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call into the library from this thread.
 */
const char *ap_last_error(void);

/**
 * Static version string.
 */
const char *ap_version(void);

void ap_string_free(char *s);

/**
 * Parses and validates a scenario document.
 */
enum ApStatus ap_scenario_from_json(const char *json, struct ApScenario **out);

void ap_scenario_free(struct ApScenario *s);

/**
 * Runs a scenario. `out_trace` receives a new trace handle; `out_outcome`
 * may be NULL.
 */
enum ApStatus ap_scenario_run(const struct ApScenario *scenario,
                              enum ApMode mode,
                              enum ApPolicy policy,
                              struct ApTrace **out_trace,
                              struct ApOutcome *out_outcome);

/**
 * Decodes a binary trace, refusing it unless the hash chain is intact.
 */
enum ApStatus ap_trace_from_bytes(const uint8_t *data, size_t len, struct ApTrace **out);

void ap_trace_free(struct ApTrace *t);

uint64_t ap_trace_len(const struct ApTrace *t);

/**
 * Canonical binary encoding. Release with `ap_bytes_free(ptr, len)`.
 */
enum ApStatus ap_trace_to_bytes(const struct ApTrace *t, uint8_t **out_ptr, size_t *out_len);

void ap_bytes_free(uint8_t *p, size_t len);

/**
 * Checks the hash chain of an encoded trace. On success `out_broken_at`
 * is -1 when intact, the first bad record otherwise, or -2 when the
 * header was tampered with. Malformed framing returns `IntegrityFailure`.
 */
enum ApStatus ap_verify_bytes(const uint8_t *data, size_t len, int64_t *out_broken_at);

/**
 * Audits a trace. `out_clean` is set to 1 or 0; `out_json`, if not NULL,
 * receives the full verdict as JSON.
 */
enum ApStatus ap_trace_audit(const struct ApTrace *t, int32_t *out_clean, char **out_json);

/**
 * Taint report for the access record `origin`, as JSON.
 */
enum ApStatus ap_trace_taint(const struct ApTrace *t, uint64_t origin, char **out_json);

enum ApStatus ap_revocation_race(uint64_t velocity,
                                 uint64_t ttl,
                                 uint64_t exec_count,
                                 uint64_t revoke_at,
                                 uint64_t horizon,
                                 struct ApRaceMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTHPROP_H */
