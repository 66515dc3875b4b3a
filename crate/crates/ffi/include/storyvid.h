#ifndef STORYVID_H
#define STORYVID_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SvMaskFormat {
  // P5 image, 255 where attention is allowed.
  SV_MASK_FORMAT_PGM = 0,
  // `"SR3A"`, u32 size, u8 mode, then little-endian u64 row words.
  SV_MASK_FORMAT_BITSET = 1,
} SvMaskFormat;

typedef enum SvMaskMode {
  SV_MASK_MODE_SR3A = 0,
  SV_MASK_MODE_HARD_REGIONAL = 1,
  SV_MASK_MODE_DENSE = 2,
} SvMaskMode;

typedef enum SvStatus {
  SV_STATUS_OK = 0,
  SV_STATUS_NULL_POINTER = 1,
  SV_STATUS_INVALID_UTF8 = 2,
  SV_STATUS_PARSE = 3,
  SV_STATUS_INVALID_ARGUMENT = 4,
  SV_STATUS_OUT_OF_RANGE = 5,
  SV_STATUS_PANIC = 6,
} SvStatus;

typedef struct SvFramePlan SvFramePlan;

typedef struct SvLatentPlan SvLatentPlan;

typedef struct SvLora SvLora;

typedef struct SvMask SvMask;

typedef struct SvRegionMap SvRegionMap;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Free with
// [`sv_string_free`].
char *sv_last_error(void);

// # Safety
// `s` must come from this library and not have been freed.
void sv_string_free(char *s);

// # Safety
// `ptr`/`len` must be a buffer returned by [`sv_mask_export`].
void sv_bytes_free(uint8_t *ptr, size_t len);

// Parses a key-frame plan from NUL-terminated text.
//
// # Safety
// `text` must be a valid C string and `out` a writable pointer.
enum SvStatus sv_frame_plan_parse(const char *text, struct SvFramePlan **out);

// # Safety
// `plan` must come from [`sv_frame_plan_parse`] or be NULL.
void sv_frame_plan_free(struct SvFramePlan *plan);

// # Safety
// `plan` must be a live handle.
size_t sv_frame_plan_key_frames(const struct SvFramePlan *plan);

// Canonical plan text, or NULL. Free with [`sv_string_free`].
//
// # Safety
// `plan` must be a live handle.
char *sv_frame_plan_emit(const struct SvFramePlan *plan);

// Runs the default layout rules and reports the error and warning counts.
//
// # Safety
// `plan` must be a live handle; the outputs must be writable.
enum SvStatus sv_frame_plan_lint(const struct SvFramePlan *plan, size_t *errors, size_t *warnings);

// Linear interpolation onto `frames` latent frames.
//
// # Safety
// `plan` must be a live handle and `out` writable.
enum SvStatus sv_interpolate(const struct SvFramePlan *plan,
                             size_t frames,
                             struct SvLatentPlan **out);

// # Safety
// `plan` must be a live handle or NULL.
void sv_latent_plan_free(struct SvLatentPlan *plan);

// Number of conditions, background included.
//
// # Safety
// `plan` must be a live handle.
size_t sv_latent_plan_conditions(const struct SvLatentPlan *plan);

// Center-cover rasterization onto a `t x h x w` grid; `t` must equal the
// plan's frame count.
//
// # Safety
// `plan` must be a live handle and `out` writable.
enum SvStatus sv_region_map_build(const struct SvLatentPlan *plan,
                                  size_t t,
                                  size_t h,
                                  size_t w,
                                  struct SvRegionMap **out);

// Region map from explicit memberships: bit `i` of `bits[token]` puts the
// token in condition `i`. `n_conditions` is at most 64.
//
// # Safety
// `bits` must hold `t * h * w` words and `out` must be writable.
enum SvStatus sv_region_map_from_bits(size_t t,
                                      size_t h,
                                      size_t w,
                                      size_t n_conditions,
                                      const uint64_t *bits,
                                      struct SvRegionMap **out);

// # Safety
// `map` must be a live handle or NULL.
void sv_region_map_free(struct SvRegionMap *map);

// # Safety
// `map` must be a live handle.
size_t sv_region_map_tokens(const struct SvRegionMap *map);

// Builds the attention mask for text segments of the given lengths, one
// per condition, followed by the map's visual tokens.
//
// # Safety
// `seg_lengths` must hold `n_segments` values; `map` must be live and `out`
// writable.
enum SvStatus sv_mask_build(const struct SvRegionMap *map,
                            const size_t *seg_lengths,
                            size_t n_segments,
                            enum SvMaskMode mode,
                            struct SvMask **out);

// # Safety
// `mask` must be a live handle or NULL.
void sv_mask_free(struct SvMask *mask);

// Sequence length `S` (text plus visual tokens).
//
// # Safety
// `mask` must be a live handle.
size_t sv_mask_size(const struct SvMask *mask);

// # Safety
// `mask` must be a live handle and `allowed` writable.
enum SvStatus sv_mask_query(const struct SvMask *mask, size_t q, size_t k, bool *allowed);

// Serializes the mask into a new buffer; release it with [`sv_bytes_free`].
//
// # Safety
// `mask` must be live; `out` and `out_len` writable.
enum SvStatus sv_mask_export(const struct SvMask *mask,
                             enum SvMaskFormat format,
                             uint8_t **out,
                             size_t *out_len);

// Adapter with row-major `a` (`rank x k`) and `b` (`d x rank`).
//
// # Safety
// `a` and `b` must hold `rank * k` and `d * rank` values; `out` writable.
enum SvStatus sv_lora_new(size_t d,
                          size_t k,
                          size_t rank,
                          const double *a,
                          const double *b,
                          double scale,
                          struct SvLora **out);

// # Safety
// `lora` must be a live handle or NULL.
void sv_lora_free(struct SvLora *lora);

// `out = W0 x + sum_i scale_i B_i A_i (mask_i ⊙ x)`.
//
// `w0` is `d x k`, `x` is `k x c` and `out` is `d x c`, all row-major.
// `masks[i]` holds `c` bytes (nonzero = token bound to adapter `i`) or is
// NULL to bind every token.
//
// # Safety
// Every pointer must reference buffers of the sizes above; `loras` and
// `masks` hold `n` entries (`masks` may itself be NULL).
enum SvStatus sv_lora_apply(const double *w0,
                            size_t d,
                            size_t k,
                            const struct SvLora *const *loras,
                            const uint8_t *const *masks,
                            size_t n,
                            const double *x,
                            size_t c,
                            double *out);

// Library version as a static string.
const char *sv_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STORYVID_H */
