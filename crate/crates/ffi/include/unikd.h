#ifndef UNIKD_H
#define UNIKD_H

#include <stddef.h>
#include <stdint.h>

typedef enum UnikdStatus {
  UNIKD_STATUS_OK = 0,
  UNIKD_STATUS_NULL_POINTER = 1,
  UNIKD_STATUS_CONTRACT = 2,
  UNIKD_STATUS_NOT_POSITIVE_DEFINITE = 3,
  UNIKD_STATUS_CONFIG = 4,
  UNIKD_STATUS_IO = 5,
  UNIKD_STATUS_CHECKPOINT = 6,
  UNIKD_STATUS_NON_FINITE_LOSS = 7,
  UNIKD_STATUS_MISSING_TEACHER = 8,
  UNIKD_STATUS_FORMAT = 9,
  UNIKD_STATUS_INVALID_UTF8 = 10,
  UNIKD_STATUS_PANIC = 11,
} UnikdStatus;

/**
 * Parsed experiment configuration.
 */
typedef struct UnikdConfig UnikdConfig;

/**
 * Result of a training run.
 */
typedef struct UnikdReport UnikdReport;

/**
 * Message of the last failure on this thread. Valid until the next failing call.
 */
const char *unikd_last_error(void);

/**
 * `KL(q ‖ p)` for diagonal Gaussians of dimension `k`.
 *
 * # Safety
 * The four arrays must hold `k` values; `out` must be writable.
 */
enum UnikdStatus unikd_kl_diag(const double *mean_q,
                               const double *var_q,
                               const double *mean_p,
                               const double *var_p,
                               size_t k,
                               double *out);

/**
 * `KL(q ‖ p)` for full-covariance Gaussians; covariances are row-major `k×k`.
 *
 * # Safety
 * Means must hold `k` values and covariances `k·k`; `out` must be writable.
 */
enum UnikdStatus unikd_kl_full(const double *mean_q,
                               const double *cov_q,
                               const double *mean_p,
                               const double *cov_p,
                               size_t k,
                               double *out);

/**
 * `softmax(z / tau)` into `out`.
 *
 * # Safety
 * `z` and `out` must hold `n` values.
 */
enum UnikdStatus unikd_softmax_tau(const double *z, size_t n, double tau, double *out);

/**
 * Batch-mean `KL(softmax(t/τ) ‖ softmax(s/τ))` over `rows × cols` logits.
 * The gradient with respect to the student logits is written to
 * `grad_out` unless it is null.
 *
 * # Safety
 * `teacher`, `student` and a non-null `grad_out` must hold `rows·cols` values.
 */
enum UnikdStatus unikd_logits_kd_loss(const double *teacher,
                                      const double *student,
                                      size_t rows,
                                      size_t cols,
                                      double tau,
                                      double *loss_out,
                                      double *grad_out);

/**
 * Runs the KL oracle self-check. `passed_out` receives 1 or 0.
 *
 * # Safety
 * Out-pointers must be writable; `max_ratio_out` may be null.
 */
enum UnikdStatus unikd_kl_selfcheck(size_t n_cases,
                                    uint64_t seed,
                                    size_t n_samples,
                                    int32_t *passed_out,
                                    double *max_ratio_out);

/**
 * Loads and validates a TOML experiment config.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UnikdStatus unikd_config_load(const char *path, struct UnikdConfig **out);

/**
 * Parses and validates TOML text.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum UnikdStatus unikd_config_parse(const char *text, struct UnikdConfig **out);

/**
 * # Safety
 * `cfg` must come from `unikd_config_load` or `unikd_config_parse`.
 */
enum UnikdStatus unikd_config_set_seed(struct UnikdConfig *cfg, uint64_t seed);

/**
 * Sets the mode by name (`unikd`, `kd_only`, `mse_only`, `hybrid_kd_mse`, `ce_only`).
 *
 * # Safety
 * `cfg` must be a live handle and `mode` a NUL-terminated string.
 */
enum UnikdStatus unikd_config_set_mode(struct UnikdConfig *cfg, const char *mode);

/**
 * # Safety
 * `cfg` must be a live handle and `dir` a NUL-terminated string.
 */
enum UnikdStatus unikd_config_set_out_dir(struct UnikdConfig *cfg, const char *dir);

/**
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void unikd_config_free(struct UnikdConfig *cfg);

/**
 * Trains with `cfg` and returns a report handle.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum UnikdStatus unikd_run_experiment(const struct UnikdConfig *cfg, struct UnikdReport **out);

/**
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum UnikdStatus unikd_report_best_val_top1(const struct UnikdReport *report, double *out);

/**
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum UnikdStatus unikd_report_epoch_count(const struct UnikdReport *report, size_t *out);

/**
 * Validation top-1 after `epoch`.
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum UnikdStatus unikd_report_val_top1(const struct UnikdReport *report, size_t epoch, double *out);

/**
 * # Safety
 * `report` must be null or a handle not yet freed.
 */
void unikd_report_free(struct UnikdReport *report);

#endif  /* UNIKD_H */
