#ifndef ASNMT_H
#define ASNMT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum AsnmtStatus {
  ASNMT_STATUS_OK = 0,
  ASNMT_STATUS_NULL_ARGUMENT = 1,
  ASNMT_STATUS_INVALID_UTF8 = 2,
  ASNMT_STATUS_IO = 3,
  ASNMT_STATUS_INVALID_CHECKPOINT = 4,
  ASNMT_STATUS_INVALID_ARGUMENT = 5,
  ASNMT_STATUS_BUFFER_TOO_SMALL = 6,
  ASNMT_STATUS_INTERNAL = 7,
} AsnmtStatus;

/**
 * Opaque handle: a loaded model together with its vocabulary.
 */
typedef struct AsnmtModel AsnmtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *asnmt_last_error(void);

/**
 * Library version as a static string.
 */
const char *asnmt_version(void);

/**
 * Load a checkpoint file into a fresh handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 * On success `*out` owns the model; release it with [`asnmt_model_free`].
 */
enum AsnmtStatus asnmt_model_load(const char *path, struct AsnmtModel **out);

/**
 * Serialize the handle back to a checkpoint file.
 *
 * # Safety
 * `handle` must come from this library and `path` must be a valid
 * NUL-terminated string.
 */
enum AsnmtStatus asnmt_model_save(const struct AsnmtModel *handle, const char *path);

/**
 * Release a handle. Null is a no-op.
 *
 * # Safety
 * `handle` must have been returned by [`asnmt_model_load`] and not yet
 * freed.
 */
void asnmt_model_free(struct AsnmtModel *handle);

/**
 * Total parameter element count; 0 for a null handle.
 *
 * # Safety
 * `handle` must be valid or null.
 */
uint64_t asnmt_model_param_count(const struct AsnmtModel *handle);

/**
 * Vocabulary size; 0 for a null handle.
 *
 * # Safety
 * `handle` must be valid or null.
 */
uint64_t asnmt_model_vocab_size(const struct AsnmtModel *handle);

/**
 * Count of exactly-zero regularization groups across every attention
 * and feed-forward matrix.
 *
 * # Safety
 * `handle` and `out` must be valid pointers.
 */
enum AsnmtStatus asnmt_model_dead_groups(const struct AsnmtModel *handle, uint64_t *out);

/**
 * Compact the model in place: groups with max-abs entry below `epsilon`
 * are zeroed first (pass 0.0 to delete exact zeros only). Writes the
 * number of deleted parameter elements to `deleted_out` when non-null.
 *
 * # Safety
 * `handle` must be a valid handle; `deleted_out` may be null.
 */
enum AsnmtStatus asnmt_model_prune(struct AsnmtModel *handle,
                                   double epsilon,
                                   uint64_t *deleted_out);

/**
 * Beam-search translation of one source sentence given as token ids.
 * The decoded tokens (no bos/eos) are written to `out`; `*out_len`
 * carries its capacity in and the decoded length out.
 *
 * # Safety
 * `src` must point to `src_len` ids, `out` to `*out_len` writable slots,
 * and `handle` must be valid.
 */
enum AsnmtStatus asnmt_translate(const struct AsnmtModel *handle,
                                 const uint32_t *src,
                                 uintptr_t src_len,
                                 uintptr_t beam,
                                 double alpha,
                                 uint32_t *out,
                                 uintptr_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASNMT_H */
