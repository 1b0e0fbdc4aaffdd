#ifndef WIENER_CUBATURE_H
#define WIENER_CUBATURE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum WcStatus {
  WC_STATUS_OK = 0,
  WC_STATUS_NULL_POINTER = 1,
  WC_STATUS_INVALID_ARGUMENT = 2,
  WC_STATUS_DOMAIN = 3,
  WC_STATUS_EVALUATION = 4,
  WC_STATUS_FLOW = 5,
  WC_STATUS_METHOD = 6,
  WC_STATUS_UNSUPPORTED = 7,
  WC_STATUS_BUDGET = 8,
  WC_STATUS_PARSE = 9,
  WC_STATUS_BUFFER_TOO_SMALL = 10,
  WC_STATUS_PANIC = 11,
} WcStatus;

typedef enum WcStrategy {
  WC_STRATEGY_FULL_TREE = 0,
  WC_STRATEGY_MONTE_CARLO = 1,
} WcStrategy;

typedef enum WcFlowMethod {
  /**
   * Exact flows when the model has them, RK4 otherwise.
   */
  WC_FLOW_METHOD_AUTO = 0,
  WC_FLOW_METHOD_EXACT = 1,
  WC_FLOW_METHOD_RK4 = 2,
  WC_FLOW_METHOD_ADAPTIVE = 3,
} WcFlowMethod;

typedef enum WcPayoffKind {
  /**
   * `(x_c − shift)^power`
   */
  WC_PAYOFF_KIND_POWER = 0,
  /**
   * `max(e^{x_c} − strike, 0)`
   */
  WC_PAYOFF_KIND_CALL = 1,
  /**
   * `cos(x_c)`
   */
  WC_PAYOFF_KIND_COSINE = 2,
} WcPayoffKind;

typedef enum WcMeshKind {
  WC_MESH_KIND_UNIFORM = 0,
  /**
   * `t_i = T(1 − (1 − i/n)^γ)`
   */
  WC_MESH_KIND_GRADED = 1,
} WcMeshKind;

/**
 * A cubature formula.
 */
typedef struct WcFormula WcFormula;

/**
 * A model: vector fields, optional linear part and exact flows.
 */
typedef struct WcModel WcModel;

typedef struct WcHestonParams {
  double mu;
  double kappa;
  double theta;
  double beta;
  double rho;
  double x0;
  double v0;
  /**
   * Nonzero for the log-price drift correction `−v/2`.
   */
  bool log_price_convexity;
} WcHestonParams;

typedef struct WcPlan {
  enum WcStrategy strategy;
  uint64_t samples;
  uint64_t seed;
  /**
   * Leaf budget of full-tree evaluation.
   */
  uint64_t budget;
  enum WcFlowMethod flow;
  size_t steps_per_segment;
  double tolerance;
} WcPlan;

typedef struct WcPayoff {
  enum WcPayoffKind kind;
  size_t component;
  double shift;
  int32_t power;
  double strike;
} WcPayoff;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string of the library, statically allocated.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
const char *wc_version(void);

/**
 * Copies the calling thread's last error message into `buf` and returns
 * its length without the terminator. Pass a null `buf` to query the
 * length; the message is truncated to `len − 1` bytes.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
size_t wc_last_error_message(char *buf, size_t len);

/**
 * Ninomiya-Victoir formula over a tensor Gauss-Hermite rule of the given
 * degree (1, 3, 5 or 7) in `brownian_dim` dimensions.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_formula_nv(size_t brownian_dim, size_t degree, struct WcFormula **out);

/**
 * Parses a formula from its text format.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_formula_parse(const char *text, struct WcFormula **out);

/**
 * Writes the text format of `formula` into `buf`. `*needed` receives the
 * text length without the terminator even when `buf` is too small.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_formula_write(const struct WcFormula *formula,
                               char *buf,
                               size_t len,
                               size_t *needed);

/**
 * Releases a formula; null is ignored.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
void wc_formula_free(struct WcFormula *formula);

/**
 * Number of paths, 0 for null.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
size_t wc_formula_len(const struct WcFormula *formula);

/**
 * Brownian dimension, 0 for null.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
size_t wc_formula_brownian_dim(const struct WcFormula *formula);

/**
 * Largest defect of the order conditions up to degree `m`, and whether
 * all of them hold to tolerance.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_formula_verify_order(const struct WcFormula *formula,
                                      size_t m,
                                      double *max_defect,
                                      bool *passed);

/**
 * Weak symmetry sampled at `samples ≥ 2` equidistant points of `[0, 1]`.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_formula_check_weak_symmetry(const struct WcFormula *formula,
                                             size_t samples,
                                             double *max_violation,
                                             bool *passed);

/**
 * The Heston benchmark parameters.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_heston_benchmark_params(struct WcHestonParams *out);

/**
 * Heston model in Stratonovich form with exact split flows.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_model_heston(const struct WcHestonParams *params, struct WcModel **out);

/**
 * `dX = −X dt + dB`.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_model_ou(struct WcModel **out);

/**
 * Spectral model with `modes` Laplacian modes and one saturating noise
 * along `h_k ∝ k^{−decay_power}`.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_model_spde(size_t modes, double sigma, double decay_power, struct WcModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
void wc_model_free(struct WcModel *model);

/**
 * State dimension, 0 for null.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
size_t wc_model_dim(const struct WcModel *model);

/**
 * Number of driving Brownian motions, 0 for null.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
size_t wc_model_brownian_dim(const struct WcModel *model);

/**
 * Mean, variance, skewness and kurtosis of the Heston log-price at `t`.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_heston_exact_moments(const struct WcHestonParams *params, double t, double *out);

/**
 * Price of `max(e^{X_t} − strike, 0)` under the Heston model.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_heston_call_price(const struct WcHestonParams *params,
                                   double t,
                                   double strike,
                                   double *out);

/**
 * Full-tree plan with the default leaf budget and automatic flows.
 */
struct WcPlan wc_plan_default(void);

/**
 * `Q_{Δt_1} ⋯ Q_{Δt_n} f(x)` on a uniform or graded mesh of `[0, horizon]`
 * with `n_steps` steps. `std_error` (may be null) receives the Monte-Carlo
 * standard error, 0 for full-tree plans.
 *
 * # Safety
 * Pointer arguments must be null or valid for the documented access, and
 * handles must come from this library and not be used after being freed.
 */
enum WcStatus wc_compose(const struct WcModel *model,
                         const struct WcFormula *formula,
                         const struct WcPayoff *f,
                         const double *x,
                         size_t x_len,
                         double horizon,
                         size_t n_steps,
                         enum WcMeshKind mesh_kind,
                         double gamma,
                         const struct WcPlan *plan,
                         double *value,
                         double *std_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WIENER_CUBATURE_H */
