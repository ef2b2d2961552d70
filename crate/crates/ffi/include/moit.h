/* C interface for the moit library. Generated by cbindgen; do not edit. */

#ifndef MOIT_H
#define MOIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible entry point.
typedef enum MoitStatus {
  MoitStatus_Ok = 0,
  // A required pointer argument was NULL.
  MoitStatus_NullPointer = 1,
  // An argument or configuration value was rejected.
  MoitStatus_InvalidArgument = 2,
  // Filesystem failure.
  MoitStatus_Io = 3,
  // A dataset, config, or CSV file failed to parse.
  MoitStatus_Parse = 4,
  // A checkpoint was missing or malformed.
  MoitStatus_Checkpoint = 5,
  // Numeric or internal failure.
  MoitStatus_Runtime = 6,
} MoitStatus;

// Opaque experiment-configuration handle.
typedef struct MoitConfig MoitConfig;

// Opaque dataset handle.
typedef struct MoitDataset MoitDataset;

// Opaque handle to a completed training (and optional fine-tuning) run.
typedef struct MoitRun MoitRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread. The pointer stays
// valid until the next failing call on the same thread; do not free it.
const char *moit_last_error(void);

// Library version as a static string; do not free.
const char *moit_version(void);

// Frees a string returned by this library.
//
// # Safety
// `s` must be a pointer previously returned by a `moit_*` function that
// documents caller ownership, and must not have been freed already.
void moit_string_free(char *s);

// Generates a Gaussian-blob dataset. `noise` is "none", "sym", or "asym";
// `asym_group` is the circular-mapping group size (0 = all classes).
//
// # Safety
// `noise` must be a valid NUL-terminated string and `out` a valid pointer.
enum MoitStatus moit_dataset_generate(size_t classes,
                                      size_t per_class,
                                      size_t dim,
                                      double center_spread,
                                      double cluster_sigma,
                                      const char *noise,
                                      double noise_rate,
                                      size_t asym_group,
                                      uint64_t seed,
                                      struct MoitDataset **out);

// Loads a dataset file written by `moit_dataset_save` (or the CLI).
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum MoitStatus moit_dataset_load(const char *path, struct MoitDataset **out);

// Writes the dataset in the documented text format.
//
// # Safety
// `dataset` must be a live handle; `path` a valid NUL-terminated string.
enum MoitStatus moit_dataset_save(const struct MoitDataset *dataset, const char *path);

// Number of samples; 0 for a NULL handle.
//
// # Safety
// `dataset` must be NULL or a live handle.
size_t moit_dataset_len(const struct MoitDataset *dataset);

// Feature dimension; 0 for a NULL handle.
//
// # Safety
// `dataset` must be NULL or a live handle.
size_t moit_dataset_dim(const struct MoitDataset *dataset);

// Class count; 0 for a NULL handle.
//
// # Safety
// `dataset` must be NULL or a live handle.
size_t moit_dataset_classes(const struct MoitDataset *dataset);

// Number of samples whose label differs from the hidden clean label.
//
// # Safety
// `dataset` must be NULL or a live handle.
size_t moit_dataset_noisy_count(const struct MoitDataset *dataset);

// # Safety
// `dataset` must be NULL or a handle not freed before.
void moit_dataset_free(struct MoitDataset *dataset);

// Creates a config with the library defaults.
//
// # Safety
// `out` must be a valid pointer.
enum MoitStatus moit_config_default(struct MoitConfig **out);

// Parses a full `key = value` config text over the defaults.
//
// # Safety
// `text` must be a valid NUL-terminated string and `out` a valid pointer.
enum MoitStatus moit_config_parse(const char *text, struct MoitConfig **out);

// Sets one configuration key (same keys as the config file format).
//
// # Safety
// `config` must be a live handle; `key` and `value` valid NUL-terminated
// strings.
enum MoitStatus moit_config_set(struct MoitConfig *config, const char *key, const char *value);

// Renders the resolved configuration; caller frees with
// [`moit_string_free`]. Returns NULL for a NULL handle.
//
// # Safety
// `config` must be NULL or a live handle.
char *moit_config_render(const struct MoitConfig *config);

// # Safety
// `config` must be NULL or a handle not freed before.
void moit_config_free(struct MoitConfig *config);

// Trains on the dataset with the given configuration.
//
// # Safety
// `config` and `dataset` must be live handles; `out` a valid pointer.
enum MoitStatus moit_train(const struct MoitConfig *config,
                           const struct MoitDataset *dataset,
                           struct MoitRun **out);

// Fine-tunes the run's model on its detected clean set, replacing the
// stored parameters and appending the fine-tuning metrics.
//
// # Safety
// All three handles must be live.
enum MoitStatus moit_run_finetune(struct MoitRun *run,
                                  const struct MoitConfig *config,
                                  const struct MoitDataset *dataset);

// Number of logged epochs (training plus any fine-tuning).
//
// # Safety
// `run` must be NULL or a live handle.
size_t moit_run_epoch_count(const struct MoitRun *run);

// Test accuracy of the last logged epoch (NaN when nothing was logged).
//
// # Safety
// `run` must be NULL or a live handle.
double moit_run_test_accuracy(const struct MoitRun *run);

// Weighted k-NN accuracy of the last logged epoch (NaN when empty).
//
// # Safety
// `run` must be NULL or a live handle.
double moit_run_knn_accuracy(const struct MoitRun *run);

// Size of the detected clean set.
//
// # Safety
// `run` must be NULL or a live handle.
size_t moit_run_clean_size(const struct MoitRun *run);

// Full metrics CSV; caller frees with [`moit_string_free`].
//
// # Safety
// `run` must be NULL or a live handle.
char *moit_run_metrics_csv(const struct MoitRun *run);

// Detection CSV of the final detection pass; caller frees with
// [`moit_string_free`].
//
// # Safety
// `run` must be NULL or a live handle.
char *moit_run_detection_csv(const struct MoitRun *run);

// Saves the run's model in the documented checkpoint format.
//
// # Safety
// `run` must be a live handle; `path` a valid NUL-terminated string.
enum MoitStatus moit_run_save_checkpoint(const struct MoitRun *run, const char *path);

// # Safety
// `run` must be NULL or a handle not freed before.
void moit_run_free(struct MoitRun *run);

// Evaluates a saved checkpoint against a dataset file: classifier accuracy
// and weighted k-NN accuracy on a deterministic test split.
//
// # Safety
// `checkpoint` and `data` must be valid NUL-terminated strings;
// `out_classifier_acc` and `out_knn_acc` valid pointers.
enum MoitStatus moit_eval_checkpoint(const char *checkpoint,
                                     const char *data,
                                     size_t knn_k,
                                     double test_fraction,
                                     double *out_classifier_acc,
                                     double *out_knn_acc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOIT_H */
