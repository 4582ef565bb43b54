#ifndef XVA_H
#define XVA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared with the command-line tool's exit codes.
 */
typedef enum XvaStatus {
  XVA_STATUS_OK = 0,
  XVA_STATUS_INVALID_ARGUMENT = 1,
  XVA_STATUS_CONFIG = 2,
  XVA_STATUS_NO_CONVERGENCE = 3,
  XVA_STATUS_IO = 4,
  XVA_STATUS_PANIC = 5,
} XvaStatus;

/**
 * Opaque engine handle.
 */
typedef struct XvaEngine XvaEngine;

/**
 * Transfer price of one added trade, all deltas as (with trade) minus (without).
 */
typedef struct XvaFtp {
  double d_ucva;
  double d_mva;
  double d_fva;
  double d_kva;
  double d_trc;
  double ftp;
} XvaFtp;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *xva_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void xva_string_free(char *s);

/**
 * Loads a run configuration file together with the portfolio and credit files it names.
 *
 * # Safety
 * `config_path` must be a nul-terminated string and `out` a valid pointer.
 */
enum XvaStatus xva_engine_open(const char *config_path, struct XvaEngine **out);

/**
 * # Safety
 * `h` must come from [`xva_engine_open`] and not have been freed. Null is ignored.
 */
void xva_engine_free(struct XvaEngine *h);

/**
 * Overrides the seed and path counts. Zero leaves a count unchanged.
 *
 * # Safety
 * `h` must be a live handle.
 */
enum XvaStatus xva_engine_set_paths(struct XvaEngine *h,
                                    uint64_t seed,
                                    size_t n_primary,
                                    size_t n_secondary);

/**
 * Prices the loaded book. The report is kept on the handle.
 *
 * # Safety
 * `h` must be a live handle.
 */
enum XvaStatus xva_engine_run(struct XvaEngine *h);

/**
 * Reads one metric of the last report: `ucva`, `mva`, `fva_star`, `fva`, `kva`,
 * `ftdcva`, `ftddva`, `trc` or `loss_at_horizon`. `se` may be null; it is set to
 * NaN when the metric has no standard error.
 *
 * # Safety
 * `h` must be a live handle, `name` a nul-terminated string, `value` valid.
 */
enum XvaStatus xva_engine_metric(struct XvaEngine *h, const char *name, double *value, double *se);

/**
 * Last report as JSON, in the same form as `xva.json`. Free with [`xva_string_free`].
 *
 * # Safety
 * `h` must be a live handle and `out` valid.
 */
enum XvaStatus xva_engine_report_json(struct XvaEngine *h, char **out);

/**
 * Writes the report files of the last run into `dir`.
 *
 * # Safety
 * `h` must be a live handle and `dir` a nul-terminated string.
 */
enum XvaStatus xva_engine_write_report(struct XvaEngine *h, const char *dir);

/**
 * Prices the trade in `trade_path` against the loaded book and fills `out`.
 *
 * # Safety
 * `h` must be a live handle, `trade_path` a nul-terminated string, `out` valid.
 */
enum XvaStatus xva_engine_incremental(struct XvaEngine *h,
                                      const char *trade_path,
                                      struct XvaFtp *out);

/**
 * Discounted capital cost on a time grid for a given capital and short-rate curve.
 * With `nonlinear` set the capital is floored at the KVA itself. Writes `n` values.
 *
 * # Safety
 * All arrays must hold `n` values.
 */
enum XvaStatus xva_kva_curve(const double *times,
                             const double *capital,
                             const double *rate,
                             size_t n,
                             double hurdle,
                             double horizon,
                             bool nonlinear,
                             double *out);

/**
 * Expected shortfall at tail probability `alpha` of equally weighted samples.
 *
 * # Safety
 * `values` must hold `n` values and `out` be valid.
 */
enum XvaStatus xva_expected_shortfall(const double *values, size_t n, double alpha, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XVA_H */
