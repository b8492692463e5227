#ifndef MAML_H
#define MAML_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MamlStatus {
  MAML_STATUS_OK = 0,
  MAML_STATUS_NULL_POINTER = 1,
  MAML_STATUS_INVALID_UTF8 = 2,
  MAML_STATUS_CONFIG = 3,
  MAML_STATUS_DATA = 4,
  MAML_STATUS_DIVERGED = 5,
  MAML_STATUS_CHECKPOINT = 6,
  MAML_STATUS_IO = 7,
  MAML_STATUS_STRUCTURE = 8,
  MAML_STATUS_NUMERIC = 9,
  MAML_STATUS_BUFFER_TOO_SMALL = 10,
  MAML_STATUS_PANIC = 11,
} MamlStatus;

/**
 * Opaque training session for one seed.
 */
typedef struct MamlTrainer MamlTrainer;

typedef struct MamlIterationStats {
  uint64_t epoch;
  uint64_t iteration;
  /**
   * Meta-objective summed over the task batch.
   */
  double loss;
  double accuracy;
  double lr;
  double grad_norm;
  double wall_ms;
  /**
   * 1 when second-order gradients were used.
   */
  uint8_t second_order;
} MamlIterationStats;

typedef struct MamlEvalStats {
  uint64_t epoch;
  double accuracy;
  double std_error;
  double loss;
} MamlEvalStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message (NUL-terminated,
 * truncated to `len`) into `buf` and returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t maml_last_error_message(char *buf, size_t len);

/**
 * Creates a trainer from a named preset for `seed`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum MamlStatus maml_trainer_new_preset(const char *name, uint64_t seed, struct MamlTrainer **out);

/**
 * Creates a trainer from TOML configuration text for `seed`.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum MamlStatus maml_trainer_new_toml(const char *toml, uint64_t seed, struct MamlTrainer **out);

/**
 * Releases a trainer. Null is ignored.
 *
 * # Safety
 * `t` must come from a constructor above and not be used afterwards.
 */
void maml_trainer_free(struct MamlTrainer *t);

/**
 * Runs one outer update. `stats` may be null.
 *
 * # Safety
 * `t` must be a live handle; `stats` null or writable.
 */
enum MamlStatus maml_trainer_step(struct MamlTrainer *t, struct MamlIterationStats *stats);

/**
 * Evaluates on the fixed validation set and records the epoch. `stats`
 * may be null.
 *
 * # Safety
 * `t` must be a live handle; `stats` null or writable.
 */
enum MamlStatus maml_trainer_end_epoch(struct MamlTrainer *t, struct MamlEvalStats *stats);

/**
 * Completed outer iterations, or `u64::MAX` for a null handle.
 *
 * # Safety
 * `t` must be null or a live handle.
 */
uint64_t maml_trainer_iteration(const struct MamlTrainer *t);

/**
 * Writes a resumable checkpoint to `path`.
 *
 * # Safety
 * `t` must be a live handle; `path` a NUL-terminated string.
 */
enum MamlStatus maml_trainer_save(const struct MamlTrainer *t, const char *path);

/**
 * Cosine-annealed outer learning rate.
 */
double maml_cosine_lr(uint64_t iteration, uint64_t total, double lr_max, double lr_min);

/**
 * 1 for second-order at `epoch`, 0 for first-order.
 */
int32_t maml_derivative_order(uint64_t epoch, uint64_t switch_epoch);

/**
 * Writes the per-step loss weights into `out` (`steps` entries, or
 * `steps + 1` with `include_pre_update`, step 0 first).
 *
 * # Safety
 * `out` must be valid for `len` doubles.
 */
enum MamlStatus maml_loss_weights(double epoch,
                                  uint64_t steps,
                                  uint8_t include_pre_update,
                                  double horizon,
                                  double floor,
                                  double *out,
                                  size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAML_H */
