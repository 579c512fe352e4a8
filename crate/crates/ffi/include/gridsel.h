#ifndef GRIDSEL_H
#define GRIDSEL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GsStatus {
  GS_STATUS_OK = 0,
  GS_STATUS_NULL_ARGUMENT = 1,
  GS_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed or inconsistent scenario / snapshot.
   */
  GS_STATUS_INVALID_INPUT = 3,
  GS_STATUS_IO = 4,
  /**
   * The simulation itself failed.
   */
  GS_STATUS_RUNTIME = 5,
  GS_STATUS_UNKNOWN_NAME = 6,
  GS_STATUS_PANIC = 7,
} GsStatus;

/**
 * The outcome of one run.
 */
typedef struct GsReport GsReport;

/**
 * A parsed scenario.
 */
typedef struct GsScenario GsScenario;

/**
 * A table store loaded from a snapshot.
 */
typedef struct GsStore GsStore;

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call on the thread.
 */
const char *gs_last_error(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void gs_string_free(char *s);

/**
 * Parses scenario TOML text.
 *
 * # Safety
 * `toml` must be a nul-terminated string; `out` must be writable.
 */
enum GsStatus gs_scenario_parse(const char *toml, struct GsScenario **out);

/**
 * Loads a scenario file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum GsStatus gs_scenario_load(const char *path, struct GsScenario **out);

/**
 * Sets a tunable (`slots`, `timeout`, `t_disk`, ...).
 *
 * # Safety
 * `s` must be a live scenario handle and `name` a nul-terminated string.
 */
enum GsStatus gs_scenario_set_param(struct GsScenario *s, const char *name, double value);

/**
 * # Safety
 * `s` must be a live scenario handle and `out` writable.
 */
enum GsStatus gs_scenario_get_param(const struct GsScenario *s, const char *name, double *out);

/**
 * # Safety
 * `s` must be null or a scenario handle that has not been freed.
 */
void gs_scenario_free(struct GsScenario *s);

/**
 * Runs the scenario with `seed`.
 *
 * # Safety
 * `s` must be a live scenario handle; `out` must be writable.
 */
enum GsStatus gs_run(const struct GsScenario *s, uint64_t seed, struct GsReport **out);

/**
 * The report as JSON; free with [`gs_string_free`].
 *
 * # Safety
 * `r` must be a live report handle; `out` must be writable.
 */
enum GsStatus gs_report_json(const struct GsReport *r, char **out);

/**
 * A summary metric such as `mean_event_rate` or `peak:db-disk`.
 *
 * # Safety
 * `r` must be a live report handle, `name` nul-terminated, `out` writable.
 */
enum GsStatus gs_report_metric(const struct GsReport *r, const char *name, double *out);

/**
 * # Safety
 * `r` must be null or a report handle that has not been freed.
 */
void gs_report_free(struct GsReport *r);

/**
 * Loads a table-store snapshot.
 *
 * # Safety
 * `path` must be nul-terminated; `out` must be writable.
 */
enum GsStatus gs_store_load(const char *path, struct GsStore **out);

/**
 * Number of rows in `table`.
 *
 * # Safety
 * `s` must be a live store handle, `table` nul-terminated, `out` writable.
 */
enum GsStatus gs_store_row_count(const struct GsStore *s, const char *table, size_t *out);

/**
 * # Safety
 * `s` must be null or a store handle that has not been freed.
 */
void gs_store_free(struct GsStore *s);

#endif  /* GRIDSEL_H */
