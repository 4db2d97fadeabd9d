#ifndef MIGRASIM_H
#define MIGRASIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MsStatus {
  MS_STATUS_OK = 0,
  MS_STATUS_NULL_POINTER = 1,
  MS_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed or inconsistent scenario.
   */
  MS_STATUS_SCHEMA = 3,
  /**
   * The simulation itself failed.
   */
  MS_STATUS_RUNTIME = 4,
  MS_STATUS_UNKNOWN_VARIANT = 5,
  /**
   * No migration ran, so there is nothing to report.
   */
  MS_STATUS_NO_MIGRATION = 6,
  MS_STATUS_PANIC = 7,
} MsStatus;

/**
 * The outcome of one run.
 */
typedef struct MsReport MsReport;

/**
 * A parsed scenario.
 */
typedef struct MsScenario MsScenario;

/**
 * Numeric cost metrics of a migration. Times are in seconds.
 */
typedef struct MsMetrics {
  bool completed;
  bool correct;
  double freeze_time;
  double state_movement_time;
  double extraction_time;
  double loading_time;
  uint64_t bytes_state_moved;
  uint64_t bytes_replicated;
  uint64_t bytes_duplicated_upstream;
  uint64_t control_messages;
  uint64_t affected_tuples;
  uint64_t duplicate_outputs_dropped;
  uint64_t duplicate_outputs_accepted;
  uint64_t tuples_lost;
  double max_added_latency;
  double mean_added_latency;
  double migration_span;
  uint64_t sink_outputs;
} MsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *ms_last_error(void);

/**
 * Library version, static storage.
 */
const char *ms_version(void);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void ms_string_free(char *s);

/**
 * Number of built-in migration variants.
 */
size_t ms_variant_count(void);

/**
 * Name of variant `i`, static storage; null when out of range.
 */
const char *ms_variant_name(size_t i);

/**
 * Parses and validates a scenario.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MsStatus ms_scenario_from_json(const char *json, struct MsScenario **out);

/**
 * # Safety
 * `s` must come from [`ms_scenario_from_json`] or be null.
 */
void ms_scenario_free(struct MsScenario *s);

/**
 * Overrides the workload seed.
 *
 * # Safety
 * `s` must be a live scenario handle.
 */
enum MsStatus ms_scenario_set_seed(struct MsScenario *s, uint64_t seed);

/**
 * Replaces the migration variant, by kebab-case or PascalCase name.
 *
 * # Safety
 * `s` must be a live scenario handle and `name` a NUL-terminated string.
 */
enum MsStatus ms_scenario_set_variant(struct MsScenario *s, const char *name);

/**
 * Runs the scenario. A run that violates correctness still returns
 * `Ok`; check `correct` in [`ms_report_metrics`].
 *
 * # Safety
 * `s` must be a live scenario handle and `out` a valid pointer.
 */
enum MsStatus ms_scenario_run(const struct MsScenario *s, struct MsReport **out);

/**
 * # Safety
 * `r` must come from [`ms_scenario_run`] or be null.
 */
void ms_report_free(struct MsReport *r);

/**
 * # Safety
 * `r` must be a live report handle and `out` a valid pointer.
 */
enum MsStatus ms_report_metrics(const struct MsReport *r, struct MsMetrics *out);

/**
 * The metrics as a CSV document with a header row.
 *
 * # Safety
 * `r` must be a live report handle and `out` a valid pointer.
 */
enum MsStatus ms_report_csv(const struct MsReport *r, char **out);

/**
 * Evaluates a decision scenario and returns the decision table as CSV.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MsStatus ms_decide_csv(const char *json, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIGRASIM_H */
