/* C interface to the HiFuse classifier library.
 *
 * Every call returns a hifuse_status; on failure hifuse_last_error() holds a
 * message for the calling thread. Strings returned through char** outputs
 * are owned by the caller and released with hifuse_string_free. Config
 * arguments are `key = value` text as accepted by config files.
 */
#ifndef HIFUSE_HIFUSE_H
#define HIFUSE_HIFUSE_H

#include <stddef.h>
#include <stdint.h>

#if defined(HIFUSE_BUILDING_LIBRARY)
#define HIFUSE_API __attribute__((visibility("default")))
#else
#define HIFUSE_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum hifuse_status {
  HIFUSE_OK = 0,
  HIFUSE_ERR_INVALID_ARGUMENT = 1,
  HIFUSE_ERR_SHAPE = 2,
  HIFUSE_ERR_IO = 3,
  HIFUSE_ERR_FORMAT = 4,
  HIFUSE_ERR_VERSION = 5,
  HIFUSE_ERR_MISSING_PARAMETER = 6,
  HIFUSE_ERR_UNEXPECTED_PARAMETER = 7,
  HIFUSE_ERR_NUMERIC = 8,
  HIFUSE_ERR_STATE = 9,
  HIFUSE_ERR_CHECK_FAILED = 10,
  HIFUSE_ERR_INTERNAL = 11
} hifuse_status;

typedef struct hifuse_model hifuse_model;

/* Progress callback: one line of text, no trailing newline. */
typedef void (*hifuse_log_fn)(const char* line, void* user);

HIFUSE_API const char* hifuse_version(void);
HIFUSE_API const char* hifuse_last_error(void);
HIFUSE_API const char* hifuse_status_name(hifuse_status status);
HIFUSE_API void hifuse_string_free(char* s);

/* Caps worker threads; n <= 0 restores the hardware default. */
HIFUSE_API void hifuse_set_threads(int n);

/* Known config keys, one per line: "name<TAB>type<TAB>help". */
HIFUSE_API hifuse_status hifuse_config_keys(char** out);
/* Parses and validates config text; *out receives every key in canonical form. */
HIFUSE_API hifuse_status hifuse_config_resolve(const char* text, char** out);

/* Fresh model from config text, initialized from the config seed. */
HIFUSE_API hifuse_status hifuse_model_create(const char* config_text, hifuse_model** out);
/* Model (weights and config) from a checkpoint file. */
HIFUSE_API hifuse_status hifuse_model_load(const char* checkpoint_path, hifuse_model** out);
/* Writes weights and config (no optimizer state). */
HIFUSE_API hifuse_status hifuse_model_save(const hifuse_model* model, const char* checkpoint_path);
HIFUSE_API void hifuse_model_free(hifuse_model* model);

HIFUSE_API hifuse_status hifuse_model_config(const hifuse_model* model, char** out);
HIFUSE_API int hifuse_model_num_classes(const hifuse_model* model);
HIFUSE_API int hifuse_model_image_size(const hifuse_model* model);
HIFUSE_API int hifuse_model_in_channels(const hifuse_model* model);
HIFUSE_API int64_t hifuse_model_num_params(const hifuse_model* model);

/* input: batch x in_channels x S x S preprocessed floats; logits: batch x num_classes. */
HIFUSE_API hifuse_status hifuse_model_forward(const hifuse_model* model, const float* input, int64_t batch,
                                              float* logits);

/* Shape schedule, per-module parameters and MACs. Any output may be NULL. */
HIFUSE_API hifuse_status hifuse_inspect(const char* config_text, char** report, int64_t* params,
                                        uint64_t* macs);

/* Trains on a class-per-folder directory, writing logs and checkpoints to
 * out_dir. resume_checkpoint may be NULL. *report receives the final
 * train/val/test metrics table. */
HIFUSE_API hifuse_status hifuse_train(const char* config_text, const char* data_dir, const char* out_dir,
                                      const char* resume_checkpoint, hifuse_log_fn log, void* user,
                                      char** report);

/* Evaluates a checkpoint on split "train", "val", "test" or "all". A
 * non-NULL config_text is applied on top of the stored config (a model that
 * no longer matches the stored weights fails with the differing names).
 * csv_path may be NULL. *report receives the metrics table and CSV rows. */
HIFUSE_API hifuse_status hifuse_eval(const char* checkpoint_path, const char* data_dir, const char* split,
                                     const char* config_text, const char* csv_path, char** report);

/* Grad-CAM for one image file (.ppm, .pgm, .hft). target_class < 0 selects
 * the predicted class. Writes <stem>.gradcam.pgm and <stem>.gradcam.ppm
 * next to the image; outputs may be NULL. */
HIFUSE_API hifuse_status hifuse_gradcam(const hifuse_model* model, const char* image_path, int target_class,
                                        const char* layer, int* used_class, char** pgm_path, char** ppm_path);

/* Runs the verification suites ("grad,window,..." or NULL for all). Each
 * result line goes to log; *failures counts failed checks; *seconds is the
 * wall time. */
HIFUSE_API hifuse_status hifuse_selfcheck(const char* only, hifuse_log_fn log, void* user, int* failures,
                                          double* seconds);

#ifdef __cplusplus
}
#endif

#endif
