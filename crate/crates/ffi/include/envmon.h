#ifndef ENVMON_H
#define ENVMON_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EnvmonStatus {
  ENVMON_STATUS_OK = 0,
  ENVMON_STATUS_NULL_POINTER = 1,
  ENVMON_STATUS_INVALID_ARGUMENT = 2,
  ENVMON_STATUS_CALIBRATION = 3,
  ENVMON_STATUS_PROTOCOL = 4,
  ENVMON_STATUS_STORAGE = 5,
  ENVMON_STATUS_BUFFER_TOO_SMALL = 6,
  ENVMON_STATUS_PANIC = 99,
} EnvmonStatus;

/**
 * Opaque round-robin archive.
 */
typedef struct EnvmonArchive EnvmonArchive;

/**
 * Opaque decoded telemetry record.
 */
typedef struct EnvmonRecord EnvmonRecord;

typedef struct EnvmonConstants {
  double d1;
  double d2;
  double d3;
} EnvmonConstants;

typedef struct EnvmonPoly {
  double c0;
  double c1;
  double c2;
} EnvmonPoly;

/**
 * Consolidation: 0 avg, 1 min, 2 max, 3 last.
 */
typedef struct EnvmonTier {
  uint32_t step_s;
  uint32_t capacity;
  uint8_t consolidation;
} EnvmonTier;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length of the last error message, excluding the terminator; 0 if none.
 */
size_t envmon_last_error_length(void);

/**
 * Copies the last error message into `buf` (NUL-terminated, truncated to
 * fit). Returns the full message length.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null.
 */
size_t envmon_last_error_message(char *buf, size_t len);

/**
 * # Safety
 * `d` and `out` must point to valid structs.
 */
enum EnvmonStatus envmon_poly_from_constants(const struct EnvmonConstants *d,
                                             struct EnvmonPoly *out);

/**
 * Inverts the compensation polynomial back to device constants.
 *
 * # Safety
 * `c` and `out` must point to valid structs.
 */
enum EnvmonStatus envmon_constants_from_poly(const struct EnvmonPoly *c,
                                             struct EnvmonConstants *out);

/**
 * Temperature in °C for a raw ADC count.
 *
 * # Safety
 * `c` and `out` must be valid.
 */
enum EnvmonStatus envmon_compensate(const struct EnvmonPoly *c, double t_raw, double *out);

/**
 * Factory-calibration error at both ends of `[t_lo, t_hi]`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum EnvmonStatus envmon_deviation_range(const struct EnvmonConstants *factory,
                                         const struct EnvmonConstants *fresh,
                                         double t_lo,
                                         double t_hi,
                                         double *at_lo,
                                         double *at_hi);

/**
 * Dallas/Maxim CRC-8 of `len` bytes. A buffer ending in its own CRC gives 0.
 *
 * # Safety
 * `data` must be valid for `len` bytes; may be null when `len` is 0.
 */
uint8_t envmon_crc8(const uint8_t *data, size_t len);

/**
 * Bus recovery time in microseconds and whether discovery is reliable.
 *
 * # Safety
 * `recovery_us` and `reliable` must be valid.
 */
enum EnvmonStatus envmon_bus_health(double radius_m,
                                    size_t sensors,
                                    size_t splitters,
                                    double *recovery_us,
                                    bool *reliable);

/**
 * Encodes one telemetry line (with trailing newline) into `buf`. `written`
 * receives the line length excluding the terminator; on
 * `BufferTooSmall` it holds the size needed.
 *
 * # Safety
 * Strings must be NUL-terminated; `buf` valid for `cap` bytes.
 */
enum EnvmonStatus envmon_record_encode(const char *sau_id,
                                       uint64_t seq,
                                       int64_t timestamp_ms,
                                       uint8_t port,
                                       const char *sensor_id,
                                       const char *metric,
                                       double value,
                                       char *buf,
                                       size_t cap,
                                       size_t *written);

/**
 * Decodes one line. Returns null on error; see the last error message.
 *
 * # Safety
 * `line` must be NUL-terminated.
 */
struct EnvmonRecord *envmon_record_decode(const char *line);

/**
 * # Safety
 * `r` must come from [`envmon_record_decode`]. Valid until freed.
 */
const char *envmon_record_sau_id(const struct EnvmonRecord *r);

/**
 * # Safety
 * `r` must come from [`envmon_record_decode`]. Valid until freed.
 */
const char *envmon_record_sensor_id(const struct EnvmonRecord *r);

/**
 * Static string; never freed.
 *
 * # Safety
 * `r` must come from [`envmon_record_decode`].
 */
const char *envmon_record_metric(const struct EnvmonRecord *r);

/**
 * # Safety
 * `r` must come from [`envmon_record_decode`].
 */
double envmon_record_value(const struct EnvmonRecord *r);

/**
 * # Safety
 * `r` must come from [`envmon_record_decode`].
 */
int64_t envmon_record_timestamp_ms(const struct EnvmonRecord *r);

/**
 * # Safety
 * `r` must come from [`envmon_record_decode`].
 */
uint64_t envmon_record_seq(const struct EnvmonRecord *r);

/**
 * # Safety
 * `r` must come from [`envmon_record_decode`].
 */
uint8_t envmon_record_port(const struct EnvmonRecord *r);

/**
 * # Safety
 * `r` must come from [`envmon_record_decode`] and not be freed twice.
 */
void envmon_record_free(struct EnvmonRecord *r);

/**
 * New empty archive with `n` tiers. Returns null on error.
 *
 * # Safety
 * `key` NUL-terminated; `tiers` valid for `n` elements.
 */
struct EnvmonArchive *envmon_archive_new(const char *key, const struct EnvmonTier *tiers, size_t n);

/**
 * Loads an archive file. Returns null on error.
 *
 * # Safety
 * Strings must be NUL-terminated.
 */
struct EnvmonArchive *envmon_archive_open(const char *key, const char *path);

/**
 * # Safety
 * `a` must be a live archive handle.
 */
enum EnvmonStatus envmon_archive_append(struct EnvmonArchive *a, int64_t ts_ms, double value);

/**
 * Writes up to `cap` points of `[t_from, t_to]`, downsampled to at most
 * `max_points`, into `ts_out`/`v_out`; `n_out` receives the count.
 *
 * # Safety
 * `a` live; output arrays valid for `cap` elements.
 */
enum EnvmonStatus envmon_archive_query(const struct EnvmonArchive *a,
                                       int64_t t_from,
                                       int64_t t_to,
                                       size_t max_points,
                                       int64_t *ts_out,
                                       double *v_out,
                                       size_t cap,
                                       size_t *n_out);

/**
 * # Safety
 * `a` live; `path` NUL-terminated.
 */
enum EnvmonStatus envmon_archive_save(const struct EnvmonArchive *a, const char *path);

/**
 * # Safety
 * `a` must come from this library and not be freed twice.
 */
void envmon_archive_free(struct EnvmonArchive *a);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENVMON_H */
