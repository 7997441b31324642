#ifndef TMAGUARD_H
#define TMAGUARD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TmagMode {
  TMAG_MODE_SIM = 0,
  TMAG_MODE_FIELD_CONTINUOUS = 1,
  TMAG_MODE_FIELD_TABLE = 2,
} TmagMode;

/**
 * Result code of every call.
 */
typedef enum TmagStatus {
  TMAG_STATUS_OK = 0,
  TMAG_STATUS_NULL_ARGUMENT = 1,
  TMAG_STATUS_INVALID_ARGUMENT = 2,
  TMAG_STATUS_CONFIG = 3,
  TMAG_STATUS_DECODE = 4,
  TMAG_STATUS_PIPELINE = 5,
  TMAG_STATUS_END_OF_STREAM = 6,
  TMAG_STATUS_PANIC = 7,
} TmagStatus;

/**
 * Stateful perception pipeline.
 */
typedef struct TmagPipeline TmagPipeline;

/**
 * Seeded scenario generator producing encoded frames.
 */
typedef struct TmagScenario TmagScenario;

/**
 * Warning decision for one distance/speed pair.
 */
typedef struct TmagDecision {
  bool warn;
  double threshold_m;
  double closing_speed_mps;
} TmagDecision;

/**
 * Outcome of one processed frame. Optional values come with a `has_` flag.
 */
typedef struct TmagFrameResult {
  uint64_t seq;
  uint64_t timestamp_ns;
  bool lanes_found;
  size_t range_samples;
  bool has_distance;
  double distance_m;
  bool has_speed;
  double speed_mps;
  bool evaluated;
  double threshold_m;
  /**
   * LED state after debouncing.
   */
  bool warn;
} TmagFrameResult;

/**
 * Library-owned bytes. Release with `tmag_bytes_free`.
 */
typedef struct TmagBytes {
  uint8_t *data;
  size_t len;
} TmagBytes;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string (truncated to `cap`) and returns the full length
 * without the terminator. An empty string means the last call succeeded.
 */
size_t tmag_last_error(char *buf, size_t cap);

/**
 * Formula stopping sight distance in feet, with the default reaction time
 * and deceleration.
 */
enum TmagStatus tmag_compute_ssd_ft(double speed_mph, double *out_ft);

/**
 * Design-table stopping sight distance in feet.
 */
enum TmagStatus tmag_design_ssd_ft(double speed_mph, double *out_ft);

/**
 * Evaluates the warning rule with default parameters. `speed_mps` is the
 * signed relative speed; negative means closing. `mode` is a `TmagMode`.
 */
enum TmagStatus tmag_should_warn(double distance_m,
                                 double speed_mps,
                                 int32_t mode,
                                 struct TmagDecision *out);

/**
 * Creates a pipeline from a TOML configuration (NULL for defaults).
 */
enum TmagStatus tmag_pipeline_new(const char *config_toml, struct TmagPipeline **out);

/**
 * Runs one encoded frame through the pipeline. On error the pipeline state
 * is left as it was before the call.
 */
enum TmagStatus tmag_pipeline_process(struct TmagPipeline *pipeline,
                                      const uint8_t *frame,
                                      size_t len,
                                      struct TmagFrameResult *out);

/**
 * Full report of the last processed frame as JSON.
 */
enum TmagStatus tmag_pipeline_last_report_json(const struct TmagPipeline *pipeline,
                                               struct TmagBytes *out);

void tmag_pipeline_free(struct TmagPipeline *pipeline);

/**
 * Creates a scenario generator from a TOML configuration (NULL for the
 * lab defaults).
 */
enum TmagStatus tmag_scenario_new(const char *config_toml, struct TmagScenario **out);

/**
 * Writes the next encoded frame to `out`, or returns
 * `TMAG_STATUS_END_OF_STREAM` once the scenario is over.
 */
enum TmagStatus tmag_scenario_next_frame(struct TmagScenario *scenario, struct TmagBytes *out);

void tmag_scenario_free(struct TmagScenario *scenario);

/**
 * Encodes a bus envelope in the broker wire format.
 */
enum TmagStatus tmag_envelope_encode(const char *topic,
                                     uint64_t seq,
                                     uint64_t timestamp_ns,
                                     const uint8_t *payload,
                                     size_t len,
                                     struct TmagBytes *out);

/**
 * Releases bytes returned by the library and resets `bytes` to empty.
 */
void tmag_bytes_free(struct TmagBytes *bytes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TMAGUARD_H */
