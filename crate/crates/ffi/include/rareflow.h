#ifndef RAREFLOW_H
#define RAREFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a call. Codes 2 to 4 match the command-line exit codes.
typedef enum RfStatus {
  RF_STATUS_OK = 0,
  RF_STATUS_NULL_POINTER = 1,
  RF_STATUS_INVALID_INPUT = 2,
  RF_STATUS_DATA_ERROR = 3,
  RF_STATUS_NUMERICAL_ERROR = 4,
  RF_STATUS_PANIC = 5,
} RfStatus;

// Streaming estimator handle.
typedef struct RfAccumulator RfAccumulator;

// Normalizing flow handle.
typedef struct RfFlow RfFlow;

// Mixture density handle.
typedef struct RfGmm RfGmm;

// Snapshot of an accumulator. Undefined quantities are `INFINITY`.
typedef struct RfSummary {
  uint64_t n;
  uint64_t hits;
  double estimate;
  double variance;
  double std_error;
  double omega;
  double ess;
} RfSummary;

typedef struct RfScene {
  double v_av;
  double v_lead;
  double gap;
  double a_lead;
} RfScene;

typedef struct RfIdmParams {
  double v0;
  double t_headway;
  double a_max;
  double b_comf;
  double s0;
  double delta;
  // Use `INFINITY` to remove the braking cap.
  double b_max;
} RfIdmParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string. The
// pointer stays valid until the next failing call on the same thread.
const char *rf_last_error(void);

// Library version as a static NUL-terminated string.
const char *rf_version(void);

// Builds a `k`-component mixture over `dim` variables from row-major
// `means` (`k·dim`) and `covariances` (`k·dim·dim`).
//
// # Safety
// Array arguments must hold the stated number of elements and `out` must
// be writable.
enum RfStatus rf_gmm_new(size_t k,
                         size_t dim,
                         const double *weights,
                         const double *means,
                         const double *covariances,
                         struct RfGmm **out);

// Loads a mixture saved by the `fit` command.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum RfStatus rf_gmm_load(const char *path, struct RfGmm **out);

// Dimension of the mixture, or 0 for a null handle.
//
// # Safety
// `gmm` must be null or a live handle.
size_t rf_gmm_dim(const struct RfGmm *gmm);

// # Safety
// `gmm` must be a live handle, `x` must hold `len` values and `out` be
// writable.
enum RfStatus rf_gmm_log_pdf(const struct RfGmm *gmm, const double *x, size_t len, double *out);

// Writes `n` draws, row-major, into `out` (`n·dim` values).
//
// # Safety
// `gmm` must be a live handle and `out` hold `out_len` values.
enum RfStatus rf_gmm_sample(const struct RfGmm *gmm,
                            uint64_t seed,
                            size_t n,
                            double *out,
                            size_t out_len);

// # Safety
// `gmm` must be null or a handle not yet freed.
void rf_gmm_free(struct RfGmm *gmm);

// Loads a flow saved by the `train` command.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum RfStatus rf_flow_load(const char *path, struct RfFlow **out);

// # Safety
// `flow` must be null or a live handle.
size_t rf_flow_dim(const struct RfFlow *flow);

// # Safety
// `flow` must be a live handle, `x` hold `len` values and `out` be writable.
enum RfStatus rf_flow_log_pdf(const struct RfFlow *flow, const double *x, size_t len, double *out);

// Maps data `x` to latent `z`; `log_det` receives `ln |det ∂z/∂x|`.
//
// # Safety
// `x` and `z` must hold `len` values; `log_det` may be null.
enum RfStatus rf_flow_forward(const struct RfFlow *flow,
                              const double *x,
                              double *z,
                              size_t len,
                              double *log_det);

// Maps latent `z` back to data `x`.
//
// # Safety
// `z` and `x` must hold `len` values.
enum RfStatus rf_flow_inverse(const struct RfFlow *flow, const double *z, double *x, size_t len);

// # Safety
// `flow` must be null or a handle not yet freed.
void rf_flow_free(struct RfFlow *flow);

struct RfAccumulator *rf_accumulator_new(void);

// Adds one scenario with likelihood ratio `weight` and collision flag
// `hit` (non-zero for a collision).
//
// # Safety
// `acc` must be a live handle.
enum RfStatus rf_accumulator_push(struct RfAccumulator *acc, double weight, int32_t hit);

// As [`rf_accumulator_push`] with the ratio given in log space.
//
// # Safety
// `acc` must be a live handle.
enum RfStatus rf_accumulator_push_log(struct RfAccumulator *acc, double log_ratio, int32_t hit);

// Folds `src` into `dst`; `src` is left unchanged.
//
// # Safety
// Both must be live handles.
enum RfStatus rf_accumulator_merge(struct RfAccumulator *dst, const struct RfAccumulator *src);

// Fills `out` for a `1 − beta` confidence level.
//
// # Safety
// `acc` must be a live handle and `out` writable.
enum RfStatus rf_accumulator_summary(const struct RfAccumulator *acc,
                                     double beta,
                                     struct RfSummary *out);

// # Safety
// `acc` must be null or a handle not yet freed.
void rf_accumulator_free(struct RfAccumulator *acc);

// Crude Monte Carlo rollouts needed to reach relative half-width `b` at
// confidence `1 − beta` for a rate `p`.
//
// # Safety
// `out` must be writable.
enum RfStatus rf_required_n(double p, double b, double beta, uint64_t *out);

// Constant-velocity time to collision; `INFINITY` when not closing.
double rf_ttc(struct RfScene scene);

// `exp(−ttc)`.
double rf_risk_weight(struct RfScene scene);

struct RfIdmParams rf_idm_default(void);

// IDM follower acceleration, capped below at `-b_max`.
//
// # Safety
// `out` must be writable.
enum RfStatus rf_idm_accel(struct RfScene scene, struct RfIdmParams params, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAREFLOW_H */
