#ifndef LAYERCARD_H
#define LAYERCARD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every call.
 */
typedef enum LcStatus {
  LC_STATUS_OK = 0,
  LC_STATUS_NULL_POINTER = 1,
  LC_STATUS_INVALID_ARGUMENT = 2,
  LC_STATUS_PARSE = 3,
  LC_STATUS_SCHEMA_MISMATCH = 4,
  LC_STATUS_NUMERICAL = 5,
  LC_STATUS_IO = 6,
  LC_STATUS_PANIC = 7,
} LcStatus;

/*
 Values of the `nonlinearity` argument of [`lc_model_generate`].
 */
typedef enum LcNonlinearity {
  LC_NONLINEARITY_IDENTITY = 0,
  LC_NONLINEARITY_TANH = 1,
} LcNonlinearity;

/*
 Values of the `objective` argument of [`lc_transfer_select`].
 */
typedef enum LcObjective {
  LC_OBJECTIVE_MAX_PERFORMANCE = 0,
  LC_OBJECTIVE_MIN_COST = 1,
  LC_OBJECTIVE_BALANCED = 2,
} LcObjective;

/*
 Opaque layer card.
 */
typedef struct LcCard LcCard;

/*
 Opaque toy model.
 */
typedef struct LcModel LcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 Valid until the next call on the same thread.
 */
const char *lc_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *lc_version(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed already.
 */
void lc_string_free(char *s);

/*
 Generates a toy model. `teacher_layers` holds `n_teacher` 0-based layer
 indices and may be null when `n_teacher` is 0.

 # Safety
 `teacher_layers` must point to `n_teacher` readable values; `out` must be writable.
 */
enum LcStatus lc_model_generate(size_t layers,
                                size_t width,
                                int32_t nonlinearity,
                                size_t head_dim,
                                const size_t *teacher_layers,
                                size_t n_teacher,
                                double teacher_scale,
                                uint64_t seed,
                                struct LcModel **out);

/*
 Parses a model from its JSON text.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum LcStatus lc_model_from_json(const char *json, struct LcModel **out);

/*
 Canonical JSON of the model.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum LcStatus lc_model_to_json(const struct LcModel *model, char **out);

/*
 Hex SHA-256 model identifier.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum LcStatus lc_model_id(const struct LcModel *model, char **out);

/*
 Number of layers, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t lc_model_layers(const struct LcModel *model);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from this library and not have been freed already.
 */
void lc_model_free(struct LcModel *model);

/*
 Profiles the model on `samples` teacher-labelled inputs drawn with
 `seed` and writes the CSV `layer,grad_norm,sigma_hat,resnorm,erank`.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum LcStatus lc_profile_csv(const struct LcModel *model,
                             size_t samples,
                             uint64_t seed,
                             char **out);

/*
 Writes the per-layer resnorm into `out`, which must hold `len` values,
 with `len` equal to the layer count.

 # Safety
 `model` must be a live handle; `out` must point to `len` writable values.
 */
enum LcStatus lc_profile_resnorm(const struct LcModel *model,
                                 size_t samples,
                                 uint64_t seed,
                                 double *out,
                                 size_t len);

/*
 Builds a layer card with calibrated costs and line-search fine-tuning.
 Probe and evaluation batches are drawn from the teacher.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum LcStatus lc_card_build(const struct LcModel *model,
                            size_t probe_samples,
                            uint64_t probe_seed,
                            size_t eval_samples,
                            uint64_t eval_seed,
                            size_t regimes,
                            size_t k_per,
                            size_t steps,
                            struct LcCard **out);

/*
 Parses a card, rejecting unknown schema versions with `LC_STATUS_SCHEMA_MISMATCH`.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum LcStatus lc_card_from_json(const char *json, struct LcCard **out);

/*
 Canonical JSON of the card.

 # Safety
 `card` must be a live handle; `out` must be writable.
 */
enum LcStatus lc_card_to_json(const struct LcCard *card, char **out);

/*
 Number of regimes, or 0 for a null handle.

 # Safety
 `card` must be null or a live handle.
 */
size_t lc_card_regimes(const struct LcCard *card);

/*
 Releases a card. Null is ignored.

 # Safety
 `card` must come from this library and not have been freed already.
 */
void lc_card_free(struct LcCard *card);

/*
 Selects a regime for `target` (per-layer resnorm, `len` values) from
 `n_cards` reference cards and writes the decision as canonical JSON.

 # Safety
 `cards` must point to `n_cards` live handles and `target` to `len` values.
 */
enum LcStatus lc_transfer_select(const struct LcCard *const *cards,
                                 size_t n_cards,
                                 const double *target,
                                 size_t len,
                                 double tau,
                                 int32_t objective,
                                 char **out);

/*
 Spearman rank correlation of two length-`n` vectors.

 # Safety
 `x` and `y` must point to `n` values; `out` must be writable.
 */
enum LcStatus lc_spearman(const double *x, const double *y, size_t n, double *out);

/*
 Runs the randomized bound audit on `instances` seeds starting at `seed`
 and writes the number of violated checks (0 means all bounds held).
 When `report_csv` is non-null the full CSV report is written there.

 # Safety
 `violations` must be writable; `report_csv` must be null or writable.
 */
enum LcStatus lc_verify(size_t instances, uint64_t seed, size_t *violations, char **report_csv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAYERCARD_H */
