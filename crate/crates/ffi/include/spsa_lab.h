#ifndef SPSA_LAB_H
#define SPSA_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpsaAlgorithm {
  SPSA_ALGORITHM_ONE_MEASUREMENT = 0,
  SPSA_ALGORITHM_TWO_MEASUREMENT = 1,
} SpsaAlgorithm;

typedef enum SpsaGainKind {
  SPSA_GAIN_KIND_CONSTANT = 0,
  SPSA_GAIN_KIND_DECAYING = 1,
  SPSA_GAIN_KIND_CENTER_ACTIVE = 2,
  SPSA_GAIN_KIND_OBJECTIVE_ACTIVE = 3,
} SpsaGainKind;

typedef enum SpsaBaseLaw {
  SPSA_BASE_LAW_RADEMACHER = 0,
  SPSA_BASE_LAW_UNIFORM = 1,
} SpsaBaseLaw;

typedef enum SpsaProbeMode {
  SPSA_PROBE_MODE_IID = 0,
  SPSA_PROBE_MODE_ZIG_ZAG = 1,
} SpsaProbeMode;

typedef enum SpsaStatus {
  SPSA_STATUS_OK = 0,
  SPSA_STATUS_NULL_POINTER = 1,
  SPSA_STATUS_INVALID_ARGUMENT = 2,
  SPSA_STATUS_CONFIG = 3,
  SPSA_STATUS_DIMENSION = 4,
  SPSA_STATUS_NON_FINITE = 5,
  SPSA_STATUS_DIVERGED = 6,
  SPSA_STATUS_NOT_CONVERGED = 7,
  SPSA_STATUS_FLOOR_VIOLATED = 8,
  SPSA_STATUS_INTERNAL = 9,
} SpsaStatus;

typedef enum SpsaBuiltin {
  SPSA_BUILTIN_QUADRATIC1D = 0,
  SPSA_BUILTIN_TRIG_QUADRATIC1D = 1,
} SpsaBuiltin;

typedef enum SpsaFbarMethod {
  SPSA_FBAR_METHOD_TWO_POINT_EXACT = 0,
  SPSA_FBAR_METHOD_GAUSS_QUADRATURE = 1,
  SPSA_FBAR_METHOD_MONTE_CARLO = 2,
} SpsaFbarMethod;

typedef struct SpsaMeanField SpsaMeanField;

typedef struct SpsaObjective SpsaObjective;

typedef struct SpsaOptimizer SpsaOptimizer;

/*
 Algorithm, schedules and probe law. Start from [`spsa_settings_default`].

 `theta_ctr` may be null (the origin); otherwise it points at `dim`
 doubles that must stay valid while the settings are passed to a
 constructor. Fields not used by the selected gain are ignored.
 */
typedef struct SpsaSettings {
  enum SpsaAlgorithm algorithm;
  double alpha0;
  double rho;
  enum SpsaGainKind gain;
  double eps_bullet;
  double kappa;
  const double *theta_ctr;
  double sigma_p;
  double obj_floor;
  enum SpsaBaseLaw base;
  double support;
  enum SpsaProbeMode mode;
  double varsigma;
  uint64_t seed;
} SpsaSettings;

/*
 Objective evaluated by C code. Must be safe to call from any thread.
 */
typedef double (*SpsaObjectiveFn)(const double *theta, size_t dim, void *user_data);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *spsa_version(void);

/*
 Copy the calling thread's last error message into `buf` (always
 NUL-terminated when `len > 0`). Returns the full message length
 excluding the terminator, or 0 if there is no error.

 # Safety
 `buf` must be null or point at `len` writable bytes.
 */
size_t spsa_last_error(char *buf, size_t len);

void spsa_clear_error(void);

/*
 Active gain, Rademacher i.i.d. probes, `alpha_n = min(1, n^-0.6)`,
 `eps_bullet = 0.1`, zig-zag factor `1/sqrt(2)` when selected.
 */
struct SpsaSettings spsa_settings_default(void);

/*
 # Safety
 `out` must be a valid pointer to a handle slot.
 */
enum SpsaStatus spsa_objective_builtin(enum SpsaBuiltin kind, struct SpsaObjective **out);

/*
 `theta' Q theta / 2` with `Q` given row-major as `dim * dim` doubles.

 # Safety
 `q` must point at `dim * dim` doubles; `out` at a handle slot.
 */
enum SpsaStatus spsa_objective_quadratic(const double *q, size_t dim, struct SpsaObjective **out);

/*
 Wrap a C callback. `user_data` is passed through untouched and must
 outlive every handle built from this objective.

 # Safety
 `eval` must be callable from any thread with `dim` doubles.
 */
enum SpsaStatus spsa_objective_callback(SpsaObjectiveFn eval,
                                        void *user_data,
                                        size_t dim,
                                        struct SpsaObjective **out);

/*
 # Safety
 `obj` must be null or a live objective handle.
 */
size_t spsa_objective_dim(const struct SpsaObjective *obj);

/*
 # Safety
 `theta` must point at `dim` doubles and `value` at one.
 */
enum SpsaStatus spsa_objective_eval(const struct SpsaObjective *obj,
                                    const double *theta,
                                    size_t dim,
                                    double *value);

/*
 # Safety
 `obj` must be null or a handle not freed before.
 */
void spsa_objective_free(struct SpsaObjective *obj);

/*
 Create an optimizer at `theta0`. The objective handle may be freed
 afterwards; the optimizer keeps its own reference.

 # Safety
 `settings` must point at valid settings, `theta0` at `dim` doubles and
 `out` at a handle slot.
 */
enum SpsaStatus spsa_optimizer_new(const struct SpsaObjective *obj,
                                   const struct SpsaSettings *settings,
                                   const double *theta0,
                                   size_t dim,
                                   struct SpsaOptimizer **out);

/*
 Take `steps` iterations, or stop early with `SpsaStatus::Diverged` once
 `|theta_n|` exceeds `guard_threshold` (at least 1e3). The iteration at
 which the guard fired is the optimizer's current iteration.

 # Safety
 `opt` must be a live optimizer handle.
 */
enum SpsaStatus spsa_optimizer_run(struct SpsaOptimizer *opt,
                                   uint64_t steps,
                                   double guard_threshold);

/*
 # Safety
 `opt` must be a live optimizer handle and `theta` point at `dim` doubles.
 */
enum SpsaStatus spsa_optimizer_theta(const struct SpsaOptimizer *opt, double *theta, size_t dim);

/*
 Iteration count `n`; 0 for a null handle.

 # Safety
 `opt` must be null or a live optimizer handle.
 */
uint64_t spsa_optimizer_iteration(const struct SpsaOptimizer *opt);

/*
 Exploration gain used by the most recent step (NaN before the first).

 # Safety
 `opt` must be null or a live optimizer handle.
 */
double spsa_optimizer_last_gain(const struct SpsaOptimizer *opt);

/*
 # Safety
 `opt` must be null or a handle not freed before.
 */
void spsa_optimizer_free(struct SpsaOptimizer *opt);

/*
 Mean-field evaluator for the 1SPSA direction. `samples` and the settings
 seed are used by the Monte-Carlo method only.

 # Safety
 `obj`, `settings` and `out` must be valid.
 */
enum SpsaStatus spsa_meanfield_new(const struct SpsaObjective *obj,
                                   const struct SpsaSettings *settings,
                                   enum SpsaFbarMethod method,
                                   size_t samples,
                                   struct SpsaMeanField **out);

/*
 `fbar(theta)` into `value`; the Monte-Carlo standard error goes into
 `stderr_out` when it is not null (zeros for deterministic methods).

 # Safety
 `theta`, `value` and a non-null `stderr_out` must each hold `dim` doubles.
 */
enum SpsaStatus spsa_meanfield_fbar(const struct SpsaMeanField *mf,
                                    const double *theta,
                                    size_t dim,
                                    double *value,
                                    double *stderr_out);

/*
 Solve `fbar(theta*) = 0` from `theta_init` with tolerance `tol` in
 `[1e-12, 1e-6]`. Writes `theta*` and the real parts of the Jacobian's
 eigenvalues (`dim` doubles each).

 # Safety
 `theta_init`, `theta_star` and `eig_real` must each hold `dim` doubles.
 */
enum SpsaStatus spsa_meanfield_equilibrium(const struct SpsaMeanField *mf,
                                           const double *theta_init,
                                           size_t dim,
                                           double tol,
                                           double *theta_star,
                                           double *eig_real);

/*
 # Safety
 `mf` must be null or a handle not freed before.
 */
void spsa_meanfield_free(struct SpsaMeanField *mf);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPSA_LAB_H */
