#ifndef CALTYPE_H
#define CALTYPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum caltype_status {
  CALTYPE_STATUS_OK = 0,
  /*
   A required pointer argument was null.
   */
  CALTYPE_STATUS_NULL_ARGUMENT = 1,
  /*
   An argument or configuration value is out of range.
   */
  CALTYPE_STATUS_INVALID_ARGUMENT = 2,
  /*
   Reading or writing a file failed.
   */
  CALTYPE_STATUS_IO = 3,
  /*
   A file is not a valid dataset or model.
   */
  CALTYPE_STATUS_FORMAT = 4,
  /*
   Trace length does not match what the model expects.
   */
  CALTYPE_STATUS_LENGTH_MISMATCH = 5,
  /*
   Not enough examples for the requested split.
   */
  CALTYPE_STATUS_INSUFFICIENT_DATA = 6,
  /*
   An internal error; the message has details.
   */
  CALTYPE_STATUS_INTERNAL = 7,
} caltype_status;

/*
 Opaque dataset handle.
 */
typedef struct caltype_dataset caltype_dataset;

/*
 Opaque trained-model handle.
 */
typedef struct caltype_model caltype_model;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread, or null if none. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *caltype_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *caltype_version(void);

/*
 Loads a dataset file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum caltype_status caltype_dataset_load(const char *path, struct caltype_dataset **out);

/*
 Simulates a dataset from the default profile. `counts` holds four per-class
 counts in PY, PV, SOM, VIP order.

 # Safety
 `counts` must point to four values and `out` must be a valid pointer.
 */
enum caltype_status caltype_dataset_generate(const uint32_t *counts,
                                             uint32_t length,
                                             uint64_t seed,
                                             struct caltype_dataset **out);

/*
 Writes a dataset file.

 # Safety
 `data` must come from this library and `path` must be a NUL-terminated string.
 */
enum caltype_status caltype_dataset_save(const struct caltype_dataset *data, const char *path);

/*
 Number of traces, or 0 for a null handle.

 # Safety
 `data` must be null or come from this library.
 */
size_t caltype_dataset_len(const struct caltype_dataset *data);

/*
 Samples per trace, or 0 for a null handle.

 # Safety
 `data` must be null or come from this library.
 */
size_t caltype_dataset_trace_length(const struct caltype_dataset *data);

/*
 Copies trace `index` into `signal` (which must hold `capacity >= trace length`
 values) and its class code (0 PY, 1 PV, 2 SOM, 3 VIP) into `label`.

 # Safety
 `data` must come from this library; `signal` must have room for `capacity` values.
 */
enum caltype_status caltype_dataset_get(const struct caltype_dataset *data,
                                        size_t index,
                                        double *signal,
                                        size_t capacity,
                                        uint8_t *label);

/*
 Releases a dataset. Null is ignored.

 # Safety
 `data` must be null or come from this library and not be used afterwards.
 */
void caltype_dataset_free(struct caltype_dataset *data);

/*
 Loads a model file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum caltype_status caltype_model_load(const char *path, struct caltype_model **out);

/*
 Writes a model file.

 # Safety
 `model` must come from this library and `path` must be a NUL-terminated string.
 */
enum caltype_status caltype_model_save(const struct caltype_model *model, const char *path);

/*
 Trains the named preset on one random split of `data` and returns the model.
 `epochs` of 0 keeps the default of 20. The test accuracy on the held-out part is
 written to `test_accuracy` when it is not null.

 # Safety
 `data` must come from this library, `preset_name` must be a NUL-terminated string
 and `out` a valid pointer.
 */
enum caltype_status caltype_model_train(const struct caltype_dataset *data,
                                        const char *preset_name,
                                        size_t train_size,
                                        size_t test_size,
                                        uint32_t epochs,
                                        uint64_t seed,
                                        struct caltype_model **out,
                                        double *test_accuracy);

/*
 Trace length the model expects, or 0 for a null handle.

 # Safety
 `model` must be null or come from this library.
 */
size_t caltype_model_input_length(const struct caltype_model *model);

/*
 Number of classes the model scores, or 0 for a null handle.

 # Safety
 `model` must be null or come from this library.
 */
size_t caltype_model_classes(const struct caltype_model *model);

/*
 Classifies one raw trace of `len` samples. The predicted class goes to `class_out`;
 when `scores` is not null, `scores_len` (at least the class count) per-class scores
 are written too: softmax probabilities for networks, vote shares for boosting.

 # Safety
 `model` must come from this library, `signal` must hold `len` values and `scores`,
 when not null, `scores_len` values.
 */
enum caltype_status caltype_model_predict(const struct caltype_model *model,
                                          const double *signal,
                                          size_t len,
                                          uint8_t *class_out,
                                          double *scores,
                                          size_t scores_len);

/*
 Accuracy of `model` over every trace in `data`.

 # Safety
 Both handles must come from this library and `accuracy` must be a valid pointer.
 */
enum caltype_status caltype_model_evaluate(const struct caltype_model *model,
                                           const struct caltype_dataset *data,
                                           double *accuracy);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must be null or come from this library and not be used afterwards.
 */
void caltype_model_free(struct caltype_model *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CALTYPE_H */
