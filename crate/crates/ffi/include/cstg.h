#ifndef CSTG_H
#define CSTG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>
#include <stddef.h>

// Result code of every fallible call.
typedef enum CstgStatus {
  CSTG_STATUS_OK = 0,
  CSTG_STATUS_NULL_POINTER = 1,
  CSTG_STATUS_INVALID_ARGUMENT = 2,
  CSTG_STATUS_CONFIG = 3,
  CSTG_STATUS_DATA = 4,
  CSTG_STATUS_DIMENSION = 5,
  CSTG_STATUS_DIVERGED = 6,
  CSTG_STATUS_IO = 7,
  CSTG_STATUS_INTERNAL = 8,
} CstgStatus;

// Opaque dataset handle.
typedef struct CstgDataset CstgDataset;

// Opaque trained-model handle.
typedef struct CstgModel CstgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *cstg_last_error(void);

// Generate a synthetic benchmark (`"xor1"`, `"xor2"`, `"xor3"` or `"xor4"`).
//
// # Safety
// `kind` must be a NUL-terminated string and `out` a writable pointer.
enum CstgStatus cstg_dataset_generate(const char *kind,
                                      size_t n,
                                      uint64_t seed,
                                      struct CstgDataset **out);

// Sample count, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t cstg_dataset_rows(const struct CstgDataset *ds);

// Explanatory feature count, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t cstg_dataset_features(const struct CstgDataset *ds);

// Context width, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t cstg_dataset_context_dim(const struct CstgDataset *ds);

// # Safety
// `ds` must be null or a handle not yet freed.
void cstg_dataset_free(struct CstgDataset *ds);

// Train from a JSON experiment config. When `ds` is non-null it replaces the
// config's dataset. The returned model is the first fold's (or the holdout)
// model.
//
// # Safety
// `config_json` must be a NUL-terminated string, `ds` null or live, and `out`
// writable.
enum CstgStatus cstg_train(const char *config_json,
                           const struct CstgDataset *ds,
                           struct CstgModel **out);

// Test metric of the returned fold (accuracy in percent or R²); NaN for null.
//
// # Safety
// `m` must be null or a live model handle.
double cstg_model_metric(const struct CstgModel *m);

// Number of gated features, or 0 when the model has no gates.
//
// # Safety
// `m` must be null or a live model handle.
size_t cstg_model_n_gates(const struct CstgModel *m);

// Eval-mode gate values for `rows` contexts of width `cols` (row-major).
// Writes `rows * cstg_model_n_gates(m)` values to `out_gates`.
//
// # Safety
// `z` must hold `rows * cols` doubles and `out_gates` room for the output.
enum CstgStatus cstg_model_gates(const struct CstgModel *m,
                                 const double *z,
                                 size_t rows,
                                 size_t cols,
                                 double *out_gates);

// Eval-mode predictions for `rows` samples: `x` is `rows x n_x`, `z` is
// `rows x n_z`. Writes `rows` values to `out`.
//
// # Safety
// Buffers must match the stated sizes.
enum CstgStatus cstg_model_predict(const struct CstgModel *m,
                                   const double *x,
                                   size_t n_x,
                                   const double *z,
                                   size_t n_z,
                                   size_t rows,
                                   double *out);

// Serialize the model checkpoint as JSON. Free the string with
// [`cstg_string_free`].
//
// # Safety
// `out` must be writable.
enum CstgStatus cstg_model_checkpoint_json(const struct CstgModel *m, char **out);

// # Safety
// `m` must be null or a handle not yet freed.
void cstg_model_free(struct CstgModel *m);

// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void cstg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSTG_H */
