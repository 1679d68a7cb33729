#ifndef CANFUSE_H
#define CANFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum CanfuseStatus {
  CANFUSE_STATUS_OK = 0,
  CANFUSE_STATUS_NULL_POINTER = 1,
  CANFUSE_STATUS_INVALID_ARGUMENT = 2,
  CANFUSE_STATUS_IO = 3,
  CANFUSE_STATUS_FORMAT = 4,
  CANFUSE_STATUS_MODEL = 5,
  CANFUSE_STATUS_DATA = 6,
  CANFUSE_STATUS_PANIC = 7,
} CanfuseStatus;

/*
 A loaded or generated set of synchronized samples.
 */
typedef struct CanfuseDataset CanfuseDataset;

/*
 A trained steering model.
 */
typedef struct CanfuseModel CanfuseModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *canfuse_version(void);

/*
 Message for the last failed call on this thread; empty after a success.
 Valid until the next canfuse call on the same thread.
 */
const char *canfuse_last_error(void);

/*
 Image geometry expected by models: height, width, channels, CAN features.
 */
enum CanfuseStatus canfuse_input_geometry(size_t *height,
                                          size_t *width,
                                          size_t *channels,
                                          size_t *can_dim);

/*
 Reads a `.cfz` dataset file.
 */
enum CanfuseStatus canfuse_dataset_load(const char *path, struct CanfuseDataset **out);

/*
 Generates the default five-group synthetic dataset.
 */
enum CanfuseStatus canfuse_dataset_synth(uint64_t seed,
                                         size_t n_per_group,
                                         struct CanfuseDataset **out);

/*
 Writes a dataset to a `.cfz` file.
 */
enum CanfuseStatus canfuse_dataset_save(const struct CanfuseDataset *dataset, const char *path);

/*
 Number of samples; 0 for a null handle.
 */
size_t canfuse_dataset_len(const struct CanfuseDataset *dataset);

void canfuse_dataset_free(struct CanfuseDataset *dataset);

/*
 Reads a checkpoint written by `canfuse train`.
 */
enum CanfuseStatus canfuse_model_load(const char *path, struct CanfuseModel **out);

/*
 1 if the model takes CAN features, 0 otherwise or for a null handle.
 */
int32_t canfuse_model_uses_can(const struct CanfuseModel *model);

void canfuse_model_free(struct CanfuseModel *model);

/*
 Predicts one steering angle. `pixels` is a height×width×channels image in
 row-major HWC order with values in [0, 1]; `can` holds the CAN features
 and must be null (with `can_len` 0) for a vision-only model.
 */
enum CanfuseStatus canfuse_model_predict(const struct CanfuseModel *model,
                                         const double *pixels,
                                         size_t pixels_len,
                                         const double *can,
                                         size_t can_len,
                                         double *out);

/*
 RMSE of the model over every sample of the dataset.
 */
enum CanfuseStatus canfuse_model_evaluate(const struct CanfuseModel *model,
                                          const struct CanfuseDataset *dataset,
                                          double *out);

/*
 Root mean square error between two arrays of length `n`.
 */
enum CanfuseStatus canfuse_rmse(const double *pred, const double *target, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CANFUSE_H */
