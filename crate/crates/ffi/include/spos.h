#ifndef SPOS_H
#define SPOS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum SposStatus {
  SPOS_STATUS_OK = 0,
  SPOS_STATUS_NULL_POINTER = 1,
  SPOS_STATUS_INVALID_UTF8 = 2,
  SPOS_STATUS_INVALID_CONFIG = 3,
  SPOS_STATUS_INVALID_SPEC = 4,
  SPOS_STATUS_INVALID_ARCHITECTURE = 5,
  SPOS_STATUS_PARSE = 6,
  SPOS_STATUS_INFEASIBLE = 7,
  SPOS_STATUS_OUT_OF_RANGE = 8,
  SPOS_STATUS_CALLBACK = 9,
  SPOS_STATUS_INTERNAL = 10,
  SPOS_STATUS_PANIC = 11,
} SposStatus;

// One architecture (a gene per choice block).
typedef struct SposArch SposArch;

// A search space together with its cost model.
typedef struct SposSpace SposSpace;

// Fitness callback for [`spos_search`]. Writes the score of `arch` (larger
// is better) to `out` and returns zero; any other return value aborts the
// search with [`SposStatus::Callback`]. `arch` is only valid during the call.
typedef int32_t (*SposFitnessFn)(const struct SposArch *arch, void *user, double *out);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into this library on the same thread.
const char *spos_last_error(void);

// Space from a built-in preset name (`desk`, `imagenet`, ...).
//
// # Safety
// `name` must be a nul-terminated string; `out` must be writable.
enum SposStatus spos_space_from_preset(const char *name, struct SposSpace **out);

// Space from a full supernet spec in JSON.
//
// # Safety
// `json` must be a nul-terminated string; `out` must be writable.
enum SposStatus spos_space_from_json(const char *json, struct SposSpace **out);

// # Safety
// `space` must come from this library (or be null) and not be used again.
void spos_space_free(struct SposSpace *space);

// # Safety
// `space` must be a live handle; `out` must be writable.
enum SposStatus spos_space_num_blocks(const struct SposSpace *space, size_t *out);

// Number of architectures; [`SposStatus::OutOfRange`] if it exceeds 2^64 - 1.
//
// # Safety
// `space` must be a live handle; `out` must be writable.
enum SposStatus spos_space_cardinality(const struct SposSpace *space, uint64_t *out);

// Parses the text form (e.g. `0.0.0-3.0.0`) and checks it against `space`.
//
// # Safety
// `space` must be a live handle, `text` nul-terminated, `out` writable.
enum SposStatus spos_arch_parse(const struct SposSpace *space,
                                const char *text_form,
                                struct SposArch **out);

// # Safety
// `arch` must come from this library (or be null) and not be used again.
void spos_arch_free(struct SposArch *arch);

// Text form of `arch`; release with [`spos_string_free`]. Null on failure.
//
// # Safety
// `arch` must be a live handle.
char *spos_arch_to_string(const struct SposArch *arch);

// # Safety
// `s` must come from [`spos_arch_to_string`] (or be null).
void spos_string_free(char *s);

// Uniform draw from `space`; identical seeds give identical draws.
//
// # Safety
// `space` must be a live handle; `out` must be writable.
enum SposStatus spos_sample_uniform(const struct SposSpace *space,
                                    uint64_t seed,
                                    struct SposArch **out);

// Multiply-accumulates of one forward pass of a single image.
//
// # Safety
// `space` and `arch` must be live handles; `out` must be writable.
enum SposStatus spos_cost_macs(const struct SposSpace *space,
                               const struct SposArch *arch,
                               uint64_t *out);

// Trainable parameters of the standalone network.
//
// # Safety
// `space` and `arch` must be live handles; `out` must be writable.
enum SposStatus spos_cost_params(const struct SposSpace *space,
                                 const struct SposArch *arch,
                                 uint64_t *out);

// MACs weighted by weight bits times activation bits; quantized spaces only.
//
// # Safety
// `space` and `arch` must be live handles; `out` must be writable.
enum SposStatus spos_cost_bitops(const struct SposSpace *space,
                                 const struct SposArch *arch,
                                 uint64_t *out);

// Whether `arch` meets every constraint (`METRIC:MAX` or
// `METRIC:MIN..MAX`).
//
// # Safety
// Handles must be live; `list` must point to `len` nul-terminated strings;
// `out` must be writable.
enum SposStatus spos_satisfies(const struct SposSpace *space,
                               const struct SposArch *arch,
                               const char *const *list,
                               size_t len,
                               bool *out);

// Constrained search with a caller-supplied fitness. `config_json` is a
// search config object (`{}` for the defaults; null also means defaults).
// The best architecture and its fitness are written to `out_best` and
// `out_fitness`.
//
// # Safety
// `space` must be a live handle, `config_json` null or nul-terminated,
// `fitness` a valid function pointer, and both outputs writable.
enum SposStatus spos_search(const struct SposSpace *space,
                            const char *config_json,
                            uint64_t seed,
                            SposFitnessFn fitness,
                            void *user,
                            struct SposArch **out_best,
                            double *out_fitness);

// Gene fields of block `block`: variant, channel and quantization indices.
//
// # Safety
// `arch` must be a live handle; the three outputs must be writable.
enum SposStatus spos_arch_gene(const struct SposArch *arch,
                               size_t block,
                               uint8_t *variant,
                               uint8_t *channel,
                               uint8_t *quant);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPOS_H */
