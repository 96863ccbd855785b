/* C ABI for the block-tower stability laboratory.
* All functions returning slk_status set a thread-local message
* readable via slk_last_error() on failure. Handles are opaque;
* free them with the matching slk_*_free function exactly once. */

#ifndef STACKLAB_H
#define STACKLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every fallible call.
 */
typedef enum slk_status {
  SLK_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SLK_NULL_ARGUMENT = 1,
  /**
   * An argument failed validation (bad group name, bad buffer size, …).
   */
  SLK_INVALID_ARGUMENT = 2,
  /**
   * Scene generation exhausted its rejection-sampling budget.
   */
  SLK_GENERATION_FAILED = 3,
  /**
   * Reading or writing a file failed.
   */
  SLK_IO_ERROR = 4,
  /**
   * The checkpoint is malformed or of an unsupported version.
   */
  SLK_BAD_CHECKPOINT = 5,
  /**
   * The mask size does not match the model input.
   */
  SLK_SHAPE_MISMATCH = 6,
  /**
   * The oracle could not produce a verdict.
   */
  SLK_NUMERICAL = 7,
  /**
   * A panic was caught at the boundary.
   */
  SLK_PANIC = 8,
} slk_status;

/**
 * Quasi-static oracle verdicts.
 */
typedef enum slk_verdict {
  SLK_VERDICT_STABLE = 0,
  SLK_VERDICT_UNSTABLE = 1,
  SLK_VERDICT_MARGINAL = 2,
} slk_verdict;

/**
 * Opaque handle to a trained stability classifier.
 */
typedef struct slk_model slk_model;

/**
 * Opaque handle to a generated scene.
 */
typedef struct slk_scene slk_scene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The crate version as a static NUL-terminated string.
 */
const char *slk_version(void);

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *slk_last_error(void);

/**
 * Generate one scene of a named group (for example `"4B-2D-Uni"`),
 * reproducing the corpus pipeline: the per-scene seed derives from
 * (`seed`, group, `scene_index`) with deterministic retries.
 *
 * # Safety
 * `group` must point to a NUL-terminated string; `out` must be a valid
 * location to store the new handle.
 */
enum slk_status slk_scene_generate(const char *group,
                                   uint32_t scene_index,
                                   uint64_t seed,
                                   struct slk_scene **out);

/**
 * Release a scene handle. Passing null is a no-op.
 *
 * # Safety
 * `scene` must have come from this library and not been freed before.
 */
void slk_scene_free(struct slk_scene *scene);

/**
 * Number of blocks in the scene.
 *
 * # Safety
 * `scene` must be a live handle; `out` must be valid for writing.
 */
enum slk_status slk_scene_block_count(const struct slk_scene *scene, uint32_t *out);

/**
 * Simulate the scene with the default engine configuration and apply the
 * displacement-threshold label: `*out_unstable` becomes 1 when any block
 * center moves more than the threshold, else 0.
 *
 * # Safety
 * `scene` must be a live handle; `out_unstable` must be valid for writing.
 */
enum slk_status slk_scene_label(const struct slk_scene *scene, uint8_t *out_unstable);

/**
 * Quasi-static equilibrium check, independent of the dynamic engine.
 * Writes the verdict and the equilibrium margin (positive: every support
 * patch can shrink by that inset and still balance; negative: patches must
 * grow).
 *
 * # Safety
 * `scene` must be a live handle; both out pointers must be valid.
 */
enum slk_status slk_scene_margin(const struct slk_scene *scene,
                                 enum slk_verdict *out_verdict,
                                 double *out_margin);

/**
 * Render the scene's training-resolution binary mask into `buf` row-major,
 * one byte per pixel (0 background, 1 foreground). `len` must be at least
 * side², where side is written to `out_side` (the training resolution).
 *
 * # Safety
 * `scene` must be a live handle; `buf` must point to `len` writable bytes;
 * `out_side` must be valid for writing.
 */
enum slk_status slk_scene_render_mask(const struct slk_scene *scene,
                                      uint8_t *buf,
                                      uintptr_t len,
                                      uint32_t *out_side);

/**
 * Load a classifier checkpoint written by the training pipeline.
 *
 * # Safety
 * `path` must point to a NUL-terminated string; `out` must be a valid
 * location to store the new handle.
 */
enum slk_status slk_model_load(const char *path, struct slk_model **out);

/**
 * Release a model handle. Passing null is a no-op.
 *
 * # Safety
 * `model` must have come from this library and not been freed before.
 */
void slk_model_free(struct slk_model *model);

/**
 * Side length (pixels) of the square mask the model consumes.
 *
 * # Safety
 * `model` must be a live handle; `out` must be valid for writing.
 */
enum slk_status slk_model_input_side(const struct slk_model *model, uint32_t *out);

/**
 * Classify a binary mask (row-major, one byte per pixel, nonzero =
 * foreground, `side` × `side` pixels, `len` ≥ side²). Writes the stable
 * class probability and 1/0 for a stable/unstable prediction.
 *
 * # Safety
 * `model` must be a live handle; `mask` must point to `len` readable
 * bytes; both out pointers must be valid.
 */
enum slk_status slk_model_predict(const struct slk_model *model,
                                  const uint8_t *mask,
                                  uintptr_t len,
                                  uint32_t side,
                                  double *out_p_stable,
                                  uint8_t *out_stable);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STACKLAB_H */
