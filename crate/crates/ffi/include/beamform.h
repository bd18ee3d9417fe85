#ifndef BEAMFORM_H
#define BEAMFORM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum BfStatus {
  BF_STATUS_OK = 0,
  BF_STATUS_NULL_POINTER = 1,
  BF_STATUS_INVALID_INPUT = 2,
  BF_STATUS_PARAMETER = 3,
  BF_STATUS_DEGENERATE = 4,
  BF_STATUS_INFEASIBLE = 5,
  BF_STATUS_SOLVER = 6,
  BF_STATUS_CONFIG = 7,
  BF_STATUS_IO = 8,
  BF_STATUS_PANIC = 9,
  BF_STATUS_BUFFER_TOO_SMALL = 10,
} BfStatus;

/**
 * Outcome of the relaxed beamformer at one bin.
 */
typedef enum BfRelaxedStatus {
  BF_RELAXED_STATUS_CONVERGED_BY_CRITERION = 0,
  BF_RELAXED_STATUS_EXHAUSTED_KMAX = 1,
  BF_RELAXED_STATUS_FALLBACK = 2,
} BfRelaxedStatus;

/**
 * Opaque disturbance CPSD of one bin.
 */
typedef struct BfCpsd BfCpsd;

/**
 * Opaque binaural filter `[w_L; w_R]`.
 */
typedef struct BfFilter BfFilter;

typedef struct BfRelaxedInfo {
  size_t iterations_used;
  enum BfRelaxedStatus status;
} BfRelaxedInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bf_version(void);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length excluding the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t bf_last_error(char *buf, size_t len);

/**
 * Creates a CPSD handle from an `m x m` Hermitian positive-definite matrix.
 *
 * # Safety
 * `data` must hold `2 m²` doubles; `out` must be writable.
 */
enum BfStatus bf_cpsd_new(const double *data, size_t m, struct BfCpsd **out);

/**
 * # Safety
 * `cpsd` must be null or a handle from [`bf_cpsd_new`] not yet freed.
 */
void bf_cpsd_free(struct BfCpsd *cpsd);

/**
 * # Safety
 * `filter` must be null or a handle returned by this library not yet freed.
 */
void bf_filter_free(struct BfFilter *filter);

/**
 * Microphone count `M` of a filter (0 for a null handle).
 *
 * # Safety
 * `filter` must be null or a live handle.
 */
size_t bf_filter_mic_count(const struct BfFilter *filter);

/**
 * Copies the `2M` complex weights `[w_L; w_R]` into `out` (`4M` doubles).
 *
 * # Safety
 * `filter` must be a live handle; `out` must hold `len` doubles.
 */
enum BfStatus bf_filter_weights(const struct BfFilter *filter, double *out, size_t len);

/**
 * `|ITF_out - ITF_in|` of an interferer with ATF `b` (`M` complex values).
 *
 * # Safety
 * `filter` must be a live handle, `b` must hold `2M` doubles, `out` writable.
 */
enum BfStatus bf_itf_error(const struct BfFilter *filter, const double *b, double *out);

/**
 * Binaural MVDR filter.
 *
 * # Safety
 * `cpsd` must be live, `a` must hold `2M` doubles, `out` writable.
 */
enum BfStatus bf_bmvdr(const struct BfCpsd *cpsd,
                       const double *a,
                       size_t ref_left,
                       size_t ref_right,
                       struct BfFilter **out);

/**
 * BLCMV with real interferer scalings `eta_left`, `eta_right` in `[0, 1)`.
 *
 * # Safety
 * As [`bf_jblcmv`].
 */
enum BfStatus bf_blcmv(const struct BfCpsd *cpsd,
                       const double *a,
                       const double *bs,
                       size_t count,
                       double eta_left,
                       double eta_right,
                       size_t ref_left,
                       size_t ref_right,
                       struct BfFilter **out);

/**
 * Joint BLCMV preserving the ITFs of up to `2M - 3` interferers.
 *
 * # Safety
 * `cpsd` must be live, `a` must hold `2M` doubles, `bs` `2M·count` doubles
 * (interferer-major), `out` writable.
 */
enum BfStatus bf_jblcmv(const struct BfCpsd *cpsd,
                        const double *a,
                        const double *bs,
                        size_t count,
                        size_t ref_left,
                        size_t ref_right,
                        struct BfFilter **out);

/**
 * Relaxed binaural LCMV with per-interferer trade-offs `c` (`count` values
 * in `[0, 1]`). `info` may be null.
 *
 * # Safety
 * As [`bf_jblcmv`]; `c` must hold `count` doubles.
 */
enum BfStatus bf_relaxed(const struct BfCpsd *cpsd,
                         const double *a,
                         const double *bs,
                         size_t count,
                         const double *c,
                         size_t k_max,
                         size_t ref_left,
                         size_t ref_right,
                         struct BfFilter **out,
                         struct BfRelaxedInfo *info);

/**
 * Runs an experiment config and writes its results to `out_dir` (or the
 * config's `output_dir` when null). Relative paths in the config resolve
 * against its directory.
 *
 * # Safety
 * `config_path` must be a NUL-terminated UTF-8 path; `out_dir` null or the same.
 */
enum BfStatus bf_run_experiment(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BEAMFORM_H */
