/* C interface for the mathtran formula translation toolkit. */

#ifndef MATHTRAN_H
#define MATHTRAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define MT_OK 0

/**
 * A required pointer argument was null.
 */
#define MT_ERR_NULL_POINTER 1

/**
 * An argument was not valid UTF-8 or named an unknown language.
 */
#define MT_ERR_INVALID_ARGUMENT 2

/**
 * The operation itself failed; see `mt_last_error`.
 */
#define MT_ERR_RUNTIME 3

/**
 * An opaque trained-model handle.
 */
typedef struct MtBundle MtBundle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the last error message recorded on this thread. Borrowed;
 * never null; empty when no error has occurred.
 */
const char *mt_last_error(void);

/**
 * Frees a string returned by this library. Null is a no-op.
 */
void mt_string_free(char *s);

/**
 * Tokenizes `text` in the given language ("latex", "semantic", or
 * "mathematica") and writes a space-joined token string to `out`.
 *
 * # Safety
 * `lang` and `text` must be valid NUL-terminated strings; `out` must
 * be a valid pointer.
 */
int32_t mt_tokenize(const char *lang, const char *text, char **out);

/**
 * Loads a trained bundle directory (as written by the `train`
 * command) into an opaque handle.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string; `out` must be valid.
 */
int32_t mt_bundle_load(const char *dir, struct MtBundle **out);

/**
 * Frees a bundle handle. Null is a no-op.
 *
 * # Safety
 * `bundle` must be a pointer previously returned by `mt_bundle_load`.
 */
void mt_bundle_free(struct MtBundle *bundle);

/**
 * Translates one source formula with beam search and writes the
 * UTF-8 result to `out`.
 *
 * # Safety
 * `bundle` must be a live handle from `mt_bundle_load`; `text` a
 * valid NUL-terminated string; `out` a valid pointer.
 */
int32_t mt_translate(const struct MtBundle *bundle,
                     const char *text,
                     uint32_t beam_size,
                     char **out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MATHTRAN_H */
