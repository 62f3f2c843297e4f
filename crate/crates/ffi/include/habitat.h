#ifndef HABITAT_H
#define HABITAT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HabitatStatus {
  HABITAT_STATUS_OK = 0,
  HABITAT_STATUS_NULL_POINTER = 1,
  HABITAT_STATUS_INVALID_INPUT = 2,
  HABITAT_STATUS_IO = 3,
  HABITAT_STATUS_PARSE = 4,
  HABITAT_STATUS_MODALITY_MISMATCH = 5,
  HABITAT_STATUS_DEGENERATE = 6,
  HABITAT_STATUS_RUNTIME = 7,
  HABITAT_STATUS_PANIC = 8,
} HabitatStatus;

/*
 Result of applying a bundle to a cohort.
 */
typedef struct HabitatApplication HabitatApplication;

/*
 A fitted model bundle.
 */
typedef struct HabitatBundle HabitatBundle;

/*
 A patient cohort (pixel matrices plus survival records).
 */
typedef struct HabitatCohort HabitatCohort;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer
 stays valid until the next call into this library on the same thread.
 */
const char *habitat_last_error(void);

/*
 Reads a cohort from a directory or manifest path.
 */
enum HabitatStatus habitat_cohort_read(const char *path, struct HabitatCohort **cohort_out);

/*
 Generates a planted synthetic cohort.
 */
enum HabitatStatus habitat_cohort_synthetic(size_t n_patients,
                                            size_t n_regions,
                                            size_t height,
                                            size_t width,
                                            uint64_t seed,
                                            struct HabitatCohort **cohort_out);

size_t habitat_cohort_n_patients(const struct HabitatCohort *cohort);

void habitat_cohort_free(struct HabitatCohort *cohort);

/*
 Runs the full experiment and writes a run directory. `config_json` may be
 NULL for defaults; otherwise it is a JSON object of pipeline settings.
 */
enum HabitatStatus habitat_run(const struct HabitatCohort *cohort,
                               const char *config_json,
                               const char *out_dir);

/*
 Loads a bundle directory (the `bundle/` folder of a run).
 */
enum HabitatStatus habitat_bundle_load(const char *dir, struct HabitatBundle **bundle_out);

/*
 The (gamma, eta) the bundle was fitted at.
 */
enum HabitatStatus habitat_bundle_theta(const struct HabitatBundle *bundle,
                                        double *gamma,
                                        size_t *eta);

void habitat_bundle_free(struct HabitatBundle *bundle);

/*
 Segments and risk-groups every patient of `cohort` with `bundle`.
 */
enum HabitatStatus habitat_apply(const struct HabitatBundle *bundle,
                                 const struct HabitatCohort *cohort,
                                 struct HabitatApplication **application_out);

size_t habitat_application_n_patients(const struct HabitatApplication *app);

/*
 Writes 1 for the high-risk group and 0 for the low-risk group.
 */
enum HabitatStatus habitat_application_group(const struct HabitatApplication *app,
                                             size_t index,
                                             int32_t *is_high);

/*
 Log-rank statistic between the holdout risk groups; `Degenerate` when
 one group is empty or has no events.
 */
enum HabitatStatus habitat_application_logrank(const struct HabitatApplication *app,
                                               double *chi_square,
                                               double *p_value);

void habitat_application_free(struct HabitatApplication *app);

/*
 Two-group log-rank test on raw (time, event) arrays.
 */
enum HabitatStatus habitat_logrank(const double *times_a,
                                   const uint8_t *events_a,
                                   size_t n_a,
                                   const double *times_b,
                                   const uint8_t *events_b,
                                   size_t n_b,
                                   double *chi_square,
                                   double *p_value);

/*
 Significance loss of a p-value at threshold `tau`; `oriented` is the
 value minimized by the optimizer.
 */
enum HabitatStatus habitat_significance_loss(double p, double tau, double *raw, double *oriented);

/*
 Expected improvement (minimization) of a Gaussian prediction.
 */
double habitat_expected_improvement(double mu, double sigma, double f_best);

/*
 Fraction of points on which two labelings disagree under the best
 matching of cluster indices.
 */
enum HabitatStatus habitat_label_distance(const size_t *a,
                                          const size_t *b,
                                          size_t n,
                                          size_t eta,
                                          double *distance);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HABITAT_H */
