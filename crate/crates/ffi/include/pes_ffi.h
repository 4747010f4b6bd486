#ifndef PES_FFI_H
#define PES_FFI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Status codes. Library errors reuse the CLI exit codes.
 */
typedef enum PesStatus {
  PES_STATUS_OK = 0,
  PES_STATUS_NULL_POINTER = 1,
  PES_STATUS_SCHEMA = 2,
  PES_STATUS_CONFIG = 3,
  PES_STATUS_ARGUMENT = 4,
  PES_STATUS_SHAPE = 5,
  PES_STATUS_NUMERIC = 6,
  PES_STATUS_EMPTY = 7,
  PES_STATUS_UNDEFINED_CONFIDENCE = 8,
  PES_STATUS_CHECKPOINT = 9,
  PES_STATUS_DATASET = 10,
  PES_STATUS_IO = 11,
  PES_STATUS_JSON = 12,
  PES_STATUS_INVALID_UTF8 = 13,
  PES_STATUS_PANIC = 14,
} PesStatus;

/**
 * Clips read from a JSONL dataset.
 */
typedef struct PesDataset PesDataset;

/**
 * AWD weight mapping handle.
 */
typedef struct PesMapping PesMapping;

/**
 * Trained model handle with its input modality.
 */
typedef struct PesModel PesModel;

/**
 * Label schema handle.
 */
typedef struct PesSchema PesSchema;

/**
 * Scores of a model on a dataset.
 */
typedef struct PesEvalResult {
  double edit;
  double f1;
  size_t clips;
} PesEvalResult;

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *pes_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pes_version(void);

/**
 * The built-in tennis schema. Never NULL.
 */
struct PesSchema *pes_schema_tennis(void);

/**
 * Parses a schema from TOML text.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` writable.
 */
enum PesStatus pes_schema_from_toml(const char *toml, struct PesSchema **out);

/**
 * # Safety
 * `schema` must be NULL or a handle from this library not yet freed.
 */
void pes_schema_free(struct PesSchema *schema);

/**
 * Number of fine classes; 0 for a NULL handle.
 *
 * # Safety
 * `schema` must be NULL or a live handle.
 */
size_t pes_schema_num_classes(const struct PesSchema *schema);

/**
 * Post-processes `n` fine-class probabilities into a valid hard vector
 * written to `out` (also of length `n`).
 *
 * # Safety
 * `probs` and `out` must each hold `n` doubles.
 */
enum PesStatus pes_fine_postprocess(const struct PesSchema *schema,
                                    const double *probs,
                                    size_t n,
                                    double *out);

/**
 * Edit distance between two class-id sequences.
 *
 * # Safety
 * `a` and `b` must hold `na` and `nb` elements; either may be NULL when
 * its length is 0.
 */
enum PesStatus pes_levenshtein(const size_t *a, size_t na, const size_t *b, size_t nb, size_t *out);

/**
 * Sample weight from a correctness rate and a distortion.
 *
 * # Safety
 * `out` must be writable.
 */
enum PesStatus pes_awd_weight(double p, double d, double *out);

/**
 * Loads a checkpoint trained under `schema`.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `schema` a live handle and `out`
 * writable.
 */
enum PesStatus pes_model_load(const char *path,
                              const struct PesSchema *schema,
                              struct PesModel **out);

/**
 * # Safety
 * `model` must be NULL or a live handle.
 */
void pes_model_free(struct PesModel *model);

/**
 * Parameter count; 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t pes_model_num_params(const struct PesModel *model);

/**
 * Reads a JSONL dataset, validating every clip against `schema`.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `schema` a live handle and `out`
 * writable.
 */
enum PesStatus pes_dataset_read(const char *path,
                                const struct PesSchema *schema,
                                struct PesDataset **out);

/**
 * # Safety
 * `data` must be NULL or a live handle.
 */
void pes_dataset_free(struct PesDataset *data);

/**
 * Number of clips; 0 for a NULL handle.
 *
 * # Safety
 * `data` must be NULL or a live handle.
 */
size_t pes_dataset_len(const struct PesDataset *data);

/**
 * Decodes every clip with the default peak decoder and scores it against
 * the ground truth at frame tolerance `delta`.
 *
 * # Safety
 * All handles must be live and `out` writable.
 */
enum PesStatus pes_evaluate(const struct PesModel *model,
                            const struct PesDataset *data,
                            const struct PesSchema *schema,
                            size_t delta,
                            struct PesEvalResult *out);

/**
 * Loads a weight mapping table.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum PesStatus pes_mapping_load(const char *path, struct PesMapping **out);

/**
 * # Safety
 * `mapping` must be NULL or a live handle.
 */
void pes_mapping_free(struct PesMapping *mapping);

/**
 * Weight for a clip with student confidence `c_s` and teacher confidence
 * `c_t`, from the nearest mapping records.
 *
 * # Safety
 * `mapping` must be a live handle and `out` writable.
 */
enum PesStatus pes_mapping_weight(const struct PesMapping *mapping,
                                  double c_s,
                                  double c_t,
                                  double *out);

#endif  /* PES_FFI_H */
