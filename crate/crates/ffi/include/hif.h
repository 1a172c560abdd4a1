#ifndef HIF_H
#define HIF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum HifStatus {
  HIF_STATUS_OK = 0,
  HIF_STATUS_NULL_POINTER = 1,
  HIF_STATUS_INVALID_ARGUMENT = 2,
  HIF_STATUS_BUFFER_TOO_SMALL = 3,
  HIF_STATUS_FRAME = 4,
  HIF_STATUS_CONFIG = 5,
  HIF_STATUS_CHECKPOINT = 6,
  HIF_STATUS_NUMERIC = 7,
  HIF_STATUS_IO = 8,
  HIF_STATUS_PANIC = 9,
} HifStatus;

typedef enum HifSearchMethod {
  HIF_SEARCH_METHOD_EXHAUSTIVE = 0,
  HIF_SEARCH_METHOD_DIAMOND = 1,
} HifSearchMethod;

/**
 * Streaming policy; create with `hif_policy_load`, release with
 * `hif_policy_free`.
 */
typedef struct HifPolicy HifPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *hif_last_error(void);

/**
 * Macroblock grid of a `width x height` frame.
 */
enum HifStatus hif_motion_grid(size_t width, size_t height, size_t *rows, size_t *cols);

/**
 * Motion field between two interleaved 8-bit frames of identical
 * geometry. Writes `rows * cols` `(dx, dy)` pairs in row-major block
 * order to `out`, which must hold `out_len >= 2 * rows * cols` values.
 */
enum HifStatus hif_estimate_motion(const uint8_t *prev,
                                   const uint8_t *cur,
                                   size_t width,
                                   size_t height,
                                   size_t channels,
                                   int32_t search_range,
                                   enum HifSearchMethod method,
                                   int32_t *out,
                                   size_t out_len);

/**
 * Loads a checkpoint and wraps it as a streaming policy for `task_id`.
 * Motion is extracted with the diamond search at the checkpoint's range.
 */
enum HifStatus hif_policy_load(const char *path, size_t task_id, struct HifPolicy **out);

/**
 * Releases a policy; NULL is ignored.
 */
void hif_policy_free(struct HifPolicy *policy);

/**
 * Clears the motion history, e.g. at an episode boundary.
 */
enum HifStatus hif_policy_reset(struct HifPolicy *policy);

/**
 * Expected observation geometry.
 */
enum HifStatus hif_policy_frame_dims(const struct HifPolicy *policy,
                                     size_t *width,
                                     size_t *height,
                                     size_t *channels);

/**
 * Chunk shape produced by `hif_policy_act`: `steps x action_dim`.
 */
enum HifStatus hif_policy_chunk_dims(const struct HifPolicy *policy,
                                     size_t *steps,
                                     size_t *action_dim);

/**
 * Selects the instruction for subsequent calls.
 */
enum HifStatus hif_policy_set_task(struct HifPolicy *policy, size_t task_id);

/**
 * Records one interleaved 8-bit observation of `len` bytes.
 */
enum HifStatus hif_policy_observe(struct HifPolicy *policy, const uint8_t *pixels, size_t len);

/**
 * Action chunk for the latest observation, row-major into `out`
 * (`out_len >= steps * action_dim`).
 */
enum HifStatus hif_policy_act(const struct HifPolicy *policy, float *out, size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIF_H */
