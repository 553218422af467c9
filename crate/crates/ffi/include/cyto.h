#ifndef CYTO_H
#define CYTO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CytoStatus {
  CYTO_STATUS_OK = 0,
  CYTO_STATUS_NULL_POINTER = 1,
  CYTO_STATUS_INVALID_ARGUMENT = 2,
  CYTO_STATUS_IO = 3,
  CYTO_STATUS_FORMAT = 4,
  CYTO_STATUS_DIMENSION = 5,
  CYTO_STATUS_MODEL = 6,
  CYTO_STATUS_BUFFER_TOO_SMALL = 7,
  CYTO_STATUS_PANIC = 8,
} CytoStatus;

/**
 * CvT architecture variant, passed as `uint32_t`.
 */
typedef enum CytoVariant {
  CYTO_VARIANT_ORIGINAL13 = 0,
  CYTO_VARIANT_PAPER_TABLE = 1,
} CytoVariant;

/**
 * Opaque flow field: `dy`, `dx` and `cellprob` planes, row-major.
 */
typedef struct CytoFlowField CytoFlowField;

/**
 * Opaque instance label map (0 = background).
 */
typedef struct CytoLabelMap CytoLabelMap;

/**
 * Opaque classifier: architecture plus weights.
 */
typedef struct CytoModel CytoModel;

/**
 * Flow-following parameters; obtain defaults from
 * [`cyto_flow_params_default`].
 */
typedef struct CytoFlowParams {
  double flow_threshold;
  double cellprob_threshold;
  size_t n_euler_steps;
  double step_size;
  size_t min_mask_pixels;
} CytoFlowParams;

/**
 * Binary foreground metrics of a predicted against a reference map.
 */
typedef struct CytoSegMetrics {
  double dice;
  double sensitivity;
  double specificity;
  uint64_t tp;
  uint64_t tn;
  uint64_t fp;
  uint64_t fn_;
} CytoSegMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *cyto_version(void);

/**
 * Message of the calling thread's most recent failure, or an empty string.
 * Valid until the next failing call on the same thread.
 */
const char *cyto_last_error_message(void);

void cyto_clear_last_error(void);

/**
 * Copies `width * height` row-major labels into a new map.
 *
 * # Safety
 * `data` must point to `width * height` readable `uint32_t`; `out` must be
 * writable.
 */
enum CytoStatus cyto_label_map_new(size_t width,
                                   size_t height,
                                   const uint32_t *data,
                                   struct CytoLabelMap **out);

/**
 * Reads a 16-bit label PNG.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CytoStatus cyto_label_map_read(const char *path, struct CytoLabelMap **out);

/**
 * # Safety
 * `map` must be a live handle; `path` a NUL-terminated string.
 */
enum CytoStatus cyto_label_map_write(const struct CytoLabelMap *map, const char *path);

/**
 * # Safety
 * `map` must be a live handle or null (returns 0).
 */
size_t cyto_label_map_width(const struct CytoLabelMap *map);

/**
 * # Safety
 * `map` must be a live handle or null (returns 0).
 */
size_t cyto_label_map_height(const struct CytoLabelMap *map);

/**
 * Number of distinct non-zero labels.
 *
 * # Safety
 * `map` must be a live handle or null (returns 0).
 */
size_t cyto_label_map_instance_count(const struct CytoLabelMap *map);

/**
 * Row-major labels, valid while the handle lives.
 *
 * # Safety
 * `map` must be a live handle or null (returns null).
 */
const uint32_t *cyto_label_map_data(const struct CytoLabelMap *map);

/**
 * # Safety
 * `map` must come from this library and not be used afterwards.
 */
void cyto_label_map_free(struct CytoLabelMap *map);

struct CytoFlowParams cyto_flow_params_default(void);

/**
 * Ground-truth flows of a label map (unit vectors inside every instance).
 *
 * # Safety
 * `map` must be a live handle; `out` must be writable.
 */
enum CytoStatus cyto_flow_field_from_labels(const struct CytoLabelMap *map,
                                            struct CytoFlowField **out);

/**
 * Reads a `.cytf` flow file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CytoStatus cyto_flow_field_read(const char *path, struct CytoFlowField **out);

/**
 * # Safety
 * `flows` must be a live handle; `path` a NUL-terminated string.
 */
enum CytoStatus cyto_flow_field_write(const struct CytoFlowField *flows, const char *path);

/**
 * # Safety
 * `flows` must be a live handle or null (returns 0).
 */
size_t cyto_flow_field_width(const struct CytoFlowField *flows);

/**
 * # Safety
 * `flows` must be a live handle or null (returns 0).
 */
size_t cyto_flow_field_height(const struct CytoFlowField *flows);

/**
 * Borrows the three planes, each `width * height` floats, valid while the
 * handle lives. Any output pointer may be null.
 *
 * # Safety
 * `flows` must be a live handle; non-null outputs must be writable.
 */
enum CytoStatus cyto_flow_field_planes(const struct CytoFlowField *flows,
                                       const float **dy,
                                       const float **dx,
                                       const float **cellprob);

/**
 * Follows the flows to instance masks and drops masks whose flow error
 * exceeds the threshold. `params` may be null for defaults.
 *
 * # Safety
 * `flows` must be a live handle; `params` null or readable; `out` writable.
 */
enum CytoStatus cyto_flow_field_segment(const struct CytoFlowField *flows,
                                        const struct CytoFlowParams *params,
                                        struct CytoLabelMap **out);

/**
 * # Safety
 * `flows` must come from this library and not be used afterwards.
 */
void cyto_flow_field_free(struct CytoFlowField *flows);

/**
 * Classifier with seeded random weights (for tests and plumbing).
 *
 * # Safety
 * `out` must be writable.
 */
enum CytoStatus cyto_model_new_random(uint32_t variant,
                                      size_t num_classes,
                                      size_t input_resolution,
                                      uint64_t seed,
                                      struct CytoModel **out);

/**
 * Classifier from a weights file, checked against the architecture.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CytoStatus cyto_model_load(uint32_t variant,
                                size_t num_classes,
                                size_t input_resolution,
                                const char *path,
                                struct CytoModel **out);

/**
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t cyto_model_num_classes(const struct CytoModel *model);

/**
 * Trainable parameters of the architecture.
 *
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t cyto_model_parameter_count(const struct CytoModel *model);

/**
 * Classifies every instance of `labels` on an interleaved 8-bit RGB image
 * of the same size. `*count` receives the number of instances; for each,
 * `ids[i]` is its label and `probs[i * num_classes ..]` its class
 * probabilities. With `capacity < *count` nothing is written and
 * `BUFFER_TOO_SMALL` is returned, so `capacity = 0` with null buffers
 * queries the count.
 *
 * # Safety
 * `model` and `labels` must be live handles; `rgb` must hold
 * `width * height * 3` bytes; `ids` and `probs` must hold `capacity` and
 * `capacity * num_classes` elements; `count` must be writable.
 */
enum CytoStatus cyto_model_classify(const struct CytoModel *model,
                                    const uint8_t *rgb,
                                    size_t width,
                                    size_t height,
                                    const struct CytoLabelMap *labels,
                                    uint32_t *ids,
                                    double *probs,
                                    size_t capacity,
                                    size_t *count);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void cyto_model_free(struct CytoModel *model);

/**
 * Foreground Dice, sensitivity and specificity of `pred` against `truth`.
 *
 * # Safety
 * `pred` and `truth` must be live handles; `out` must be writable.
 */
enum CytoStatus cyto_seg_metrics(const struct CytoLabelMap *pred,
                                 const struct CytoLabelMap *truth,
                                 struct CytoSegMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CYTO_H */
