#ifndef POINTFUSE_H
#define POINTFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_INVALID_INPUT = 2,
  PF_STATUS_SHAPE_MISMATCH = 3,
  PF_STATUS_NUMERIC = 4,
  PF_STATUS_DECODE = 5,
  PF_STATUS_IO = 6,
  PF_STATUS_JSON = 7,
  PF_STATUS_UTF8 = 8,
  PF_STATUS_BUFFER_TOO_SMALL = 9,
  PF_STATUS_PANIC = 10,
} PfStatus;

/**
 * Scenario configuration.
 */
typedef struct PfConfig PfConfig;

/**
 * A decoded message packet.
 */
typedef struct PfPacket PfPacket;

/**
 * Result of one pipeline run.
 */
typedef struct PfReport PfReport;

/**
 * Headline numbers of a run.
 */
typedef struct PfRunSummary {
  size_t agents;
  size_t fused_tokens;
  uint64_t payload_bytes;
  uint64_t total_bytes;
  size_t foreground_total;
  size_t foreground_retained;
  double recall;
  double aligned_recall;
  double offset_loss;
  uint64_t flops_total;
} PfRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length of the thread's last error message in bytes, excluding the NUL.
 */
size_t pf_last_error_length(void);

/**
 * Copies the last error message, NUL-terminated and truncated to `cap`.
 * Returns the number of bytes written, excluding the NUL.
 */
size_t pf_last_error_message(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pf_version(void);

enum PfStatus pf_config_new_default(struct PfConfig **out);

/**
 * Parses a JSON scenario; absent fields take their defaults.
 */
enum PfStatus pf_config_from_json(const char *json, struct PfConfig **out);

enum PfStatus pf_config_set_seed(struct PfConfig *cfg, uint64_t seed);

/**
 * Tokens each agent transmits; 0 transmits everything.
 */
enum PfStatus pf_config_set_top_k(struct PfConfig *cfg, size_t k);

/**
 * Neighbor localization noise: meters and radians.
 */
enum PfStatus pf_config_set_noise(struct PfConfig *cfg, double pos_std, double rot_std);

void pf_config_free(struct PfConfig *cfg);

/**
 * Ego foreground tokens per ground-truth vehicle, from tokenization alone.
 */
enum PfStatus pf_token_budget(const struct PfConfig *cfg,
                              double *mean_per_vehicle,
                              size_t *total_foreground);

/**
 * Runs the full pipeline for `cfg`.
 */
enum PfStatus pf_run(const struct PfConfig *cfg, struct PfReport **out);

enum PfStatus pf_report_summary(const struct PfReport *report, struct PfRunSummary *out);

/**
 * Full report as JSON, not NUL-terminated.
 */
enum PfStatus pf_report_to_json(const struct PfReport *report,
                                uint8_t *buf,
                                size_t cap,
                                size_t *written);

void pf_report_free(struct PfReport *report);

/**
 * Byte counts of a `k`-token, `d`-feature packet.
 */
enum PfStatus pf_packet_bytes(size_t k, size_t d, uint64_t *payload_bytes, uint64_t *total_bytes);

/**
 * Serializes one packet. `features` is row-major `k × d`, `coords` is
 * `k × 3`, `pose` is `[x, y, z, yaw, pitch, roll]`.
 */
enum PfStatus pf_packet_encode(uint32_t agent_id,
                               size_t k,
                               size_t d,
                               const float *features,
                               const float *coords,
                               const float *pose,
                               uint8_t *buf,
                               size_t cap,
                               size_t *written);

enum PfStatus pf_packet_decode(const uint8_t *buf, size_t len, struct PfPacket **out);

enum PfStatus pf_packet_shape(const struct PfPacket *packet,
                              uint32_t *agent_id,
                              size_t *k,
                              size_t *d);

/**
 * Copies the packet arrays into caller buffers sized from [`pf_packet_shape`].
 * Any output pointer may be null to skip that array.
 */
enum PfStatus pf_packet_copy(const struct PfPacket *packet,
                             float *features,
                             float *coords,
                             float *pose);

void pf_packet_free(struct PfPacket *packet);

/**
 * Position of `(x, y)` along the Hilbert curve over a `2^order` grid.
 */
enum PfStatus pf_hilbert_key(uint32_t x, uint32_t y, uint32_t order, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POINTFUSE_H */
