//! C ABI over the plan, raster, mask and adapter operations of `storyvid`.
//!
//! Objects cross the boundary as opaque handles created by `sv_*_new` /
//! `sv_*_parse` style functions and released with the matching `sv_*_free`.
//! Fallible calls return an [`SvStatus`]; the message of the most recent
//! failure on the calling thread is available from [`sv_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ndarray::{Array2, ArrayView2};
use storyvid::lora::{lora_apply, LoraKind, LoraModule, LoraRole};
use storyvid::mask::{build_attention_mask, AttentionMask, MaskMode, SegmentLayout};
use storyvid::plan::{
    emit_frame_plan, interpolate_plan, parse_frame_plan, validate_frame_plan, FrameLevelPlan, InterpolationMode,
    LatentPlan, RuleConfig,
};
use storyvid::raster::{build_region_map, BackgroundMode, CoverRule, LatentGrid, RegionMap};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidArgument = 4,
    OutOfRange = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvMaskMode {
    Sr3a = 0,
    HardRegional = 1,
    Dense = 2,
}

impl From<SvMaskMode> for MaskMode {
    fn from(m: SvMaskMode) -> Self {
        match m {
            SvMaskMode::Sr3a => MaskMode::Sr3a,
            SvMaskMode::HardRegional => MaskMode::HardRegional,
            SvMaskMode::Dense => MaskMode::Dense,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvMaskFormat {
    /// P5 image, 255 where attention is allowed.
    Pgm = 0,
    /// `"SR3A"`, u32 size, u8 mode, then little-endian u64 row words.
    Bitset = 1,
}

pub struct SvFramePlan(FrameLevelPlan);
pub struct SvLatentPlan(LatentPlan);
pub struct SvRegionMap(RegionMap);
pub struct SvMask(AttentionMask);
pub struct SvLora(LoraModule);

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(SvStatus, String);

impl Failure {
    fn new(status: SvStatus, msg: impl ToString) -> Self {
        Failure(status, msg.to_string())
    }
}

/// Runs `f`, turning errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("panic: {msg}"));
            SvStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: null is rejected; callers pass handles obtained from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Failure::new(SvStatus::NullPointer, format!("{name} is null")))
}

fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: null is rejected; the caller owns the pointee.
    unsafe { p.as_mut() }.ok_or_else(|| Failure::new(SvStatus::NullPointer, format!("{name} is null")))
}

fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(SvStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: caller guarantees `len` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(SvStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|e| Failure::new(SvStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(std::ptr::null_mut())
}

fn matrix(p: *const f64, rows: usize, cols: usize, name: &str) -> Result<Array2<f64>, Failure> {
    let data = slice(p, rows * cols, name)?;
    Ok(ArrayView2::from_shape((rows, cols), data)
        .map_err(|e| Failure::new(SvStatus::InvalidArgument, e))?
        .to_owned())
}

/// Message of the last failed call on this thread, or NULL. Free with
/// [`sv_string_free`].
#[no_mangle]
pub extern "C" fn sv_last_error() -> *mut c_char {
    LAST_ERROR
        .with(|e| e.borrow().clone())
        .map_or(std::ptr::null_mut(), into_c_string)
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `ptr`/`len` must be a buffer returned by [`sv_mask_export`].
#[no_mangle]
pub unsafe extern "C" fn sv_bytes_free(ptr: *mut u8, len: usize) {
    if !ptr.is_null() {
        drop(Vec::from_raw_parts(ptr, len, len));
    }
}

/// Parses a key-frame plan from NUL-terminated text.
///
/// # Safety
/// `text` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sv_frame_plan_parse(text: *const c_char, out: *mut *mut SvFramePlan) -> SvStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let plan = parse_frame_plan(c_str(text, "text")?).map_err(|e| Failure::new(SvStatus::Parse, e))?;
        *out = Box::into_raw(Box::new(SvFramePlan(plan)));
        Ok(())
    })
}

/// # Safety
/// `plan` must come from [`sv_frame_plan_parse`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn sv_frame_plan_free(plan: *mut SvFramePlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// # Safety
/// `plan` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sv_frame_plan_key_frames(plan: *const SvFramePlan) -> usize {
    plan.as_ref().map_or(0, |p| p.0.key_frames.len())
}

/// Canonical plan text, or NULL. Free with [`sv_string_free`].
///
/// # Safety
/// `plan` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sv_frame_plan_emit(plan: *const SvFramePlan) -> *mut c_char {
    match plan.as_ref() {
        Some(p) => into_c_string(emit_frame_plan(&p.0)),
        None => std::ptr::null_mut(),
    }
}

/// Runs the default layout rules and reports the error and warning counts.
///
/// # Safety
/// `plan` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_frame_plan_lint(
    plan: *const SvFramePlan,
    errors: *mut usize,
    warnings: *mut usize,
) -> SvStatus {
    guard(|| {
        let plan = non_null(plan, "plan")?;
        let report = validate_frame_plan(&plan.0, &RuleConfig::default());
        *out_ptr(errors, "errors")? = report.errors.len();
        *out_ptr(warnings, "warnings")? = report.warnings.len();
        Ok(())
    })
}

/// Linear interpolation onto `frames` latent frames.
///
/// # Safety
/// `plan` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_interpolate(
    plan: *const SvFramePlan,
    frames: usize,
    out: *mut *mut SvLatentPlan,
) -> SvStatus {
    guard(|| {
        let plan = non_null(plan, "plan")?;
        let out = out_ptr(out, "out")?;
        let latent = interpolate_plan(&plan.0, frames, InterpolationMode::Linear)
            .map_err(|e| Failure::new(SvStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(SvLatentPlan(latent)));
        Ok(())
    })
}

/// # Safety
/// `plan` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn sv_latent_plan_free(plan: *mut SvLatentPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Number of conditions, background included.
///
/// # Safety
/// `plan` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sv_latent_plan_conditions(plan: *const SvLatentPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.0.conditions.len())
}

/// Center-cover rasterization onto a `t x h x w` grid; `t` must equal the
/// plan's frame count.
///
/// # Safety
/// `plan` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_region_map_build(
    plan: *const SvLatentPlan,
    t: usize,
    h: usize,
    w: usize,
    out: *mut *mut SvRegionMap,
) -> SvStatus {
    guard(|| {
        let plan = non_null(plan, "plan")?;
        let out = out_ptr(out, "out")?;
        let grid = LatentGrid::new(t, h, w).map_err(|e| Failure::new(SvStatus::InvalidArgument, e))?;
        let map = build_region_map(&plan.0, grid, BackgroundMode::Complement, CoverRule::Center)
            .map_err(|e| Failure::new(SvStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(SvRegionMap(map)));
        Ok(())
    })
}

/// Region map from explicit memberships: bit `i` of `bits[token]` puts the
/// token in condition `i`. `n_conditions` is at most 64.
///
/// # Safety
/// `bits` must hold `t * h * w` words and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_region_map_from_bits(
    t: usize,
    h: usize,
    w: usize,
    n_conditions: usize,
    bits: *const u64,
    out: *mut *mut SvRegionMap,
) -> SvStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if n_conditions == 0 || n_conditions > 64 {
            return Err(Failure::new(
                SvStatus::OutOfRange,
                format!("n_conditions {n_conditions} not in 1..=64"),
            ));
        }
        let grid = LatentGrid::new(t, h, w).map_err(|e| Failure::new(SvStatus::InvalidArgument, e))?;
        let words = slice(bits, grid.token_count(), "bits")?;
        let membership = words
            .iter()
            .map(|&word| (0..64).filter(|i| word >> i & 1 == 1).collect())
            .collect();
        let map = RegionMap::from_membership(grid, n_conditions, membership)
            .map_err(|e| Failure::new(SvStatus::OutOfRange, e))?;
        *out = Box::into_raw(Box::new(SvRegionMap(map)));
        Ok(())
    })
}

/// # Safety
/// `map` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn sv_region_map_free(map: *mut SvRegionMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// # Safety
/// `map` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sv_region_map_tokens(map: *const SvRegionMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.token_count())
}

/// Builds the attention mask for text segments of the given lengths, one
/// per condition, followed by the map's visual tokens.
///
/// # Safety
/// `seg_lengths` must hold `n_segments` values; `map` must be live and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sv_mask_build(
    map: *const SvRegionMap,
    seg_lengths: *const usize,
    n_segments: usize,
    mode: SvMaskMode,
    out: *mut *mut SvMask,
) -> SvStatus {
    guard(|| {
        let map = non_null(map, "map")?;
        let out = out_ptr(out, "out")?;
        let segs = slice(seg_lengths, n_segments, "seg_lengths")?.to_vec();
        let layout =
            SegmentLayout::new(segs, map.0.token_count()).map_err(|e| Failure::new(SvStatus::InvalidArgument, e))?;
        let mask = build_attention_mask(&layout, &map.0, mode.into())
            .map_err(|e| Failure::new(SvStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(SvMask(mask)));
        Ok(())
    })
}

/// # Safety
/// `mask` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn sv_mask_free(mask: *mut SvMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Sequence length `S` (text plus visual tokens).
///
/// # Safety
/// `mask` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sv_mask_size(mask: *const SvMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.size())
}

/// # Safety
/// `mask` must be a live handle and `allowed` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_mask_query(mask: *const SvMask, q: usize, k: usize, allowed: *mut bool) -> SvStatus {
    guard(|| {
        let mask = non_null(mask, "mask")?;
        *out_ptr(allowed, "allowed")? = mask.0.query(q, k).map_err(|e| Failure::new(SvStatus::OutOfRange, e))?;
        Ok(())
    })
}

/// Serializes the mask into a new buffer; release it with [`sv_bytes_free`].
///
/// # Safety
/// `mask` must be live; `out` and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_mask_export(
    mask: *const SvMask,
    format: SvMaskFormat,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> SvStatus {
    guard(|| {
        let mask = non_null(mask, "mask")?;
        let out = out_ptr(out, "out")?;
        let out_len = out_ptr(out_len, "out_len")?;
        let bytes = match format {
            SvMaskFormat::Pgm => mask.0.to_pgm(),
            SvMaskFormat::Bitset => mask.0.to_bitset_bytes(),
        };
        let mut bytes = bytes.into_boxed_slice();
        *out_len = bytes.len();
        *out = bytes.as_mut_ptr();
        std::mem::forget(bytes);
        Ok(())
    })
}

/// Adapter with row-major `a` (`rank x k`) and `b` (`d x rank`).
///
/// # Safety
/// `a` and `b` must hold `rank * k` and `d * rank` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_lora_new(
    d: usize,
    k: usize,
    rank: usize,
    a: *const f64,
    b: *const f64,
    scale: f64,
    out: *mut *mut SvLora,
) -> SvStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let a = matrix(a, rank, k, "a")?;
        let b = matrix(b, d, rank, "b")?;
        let module = LoraModule::from_parts(a, b, scale, LoraRole::Spatial, LoraKind::Subject)
            .map_err(|e| Failure::new(SvStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(SvLora(module)));
        Ok(())
    })
}

/// # Safety
/// `lora` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn sv_lora_free(lora: *mut SvLora) {
    if !lora.is_null() {
        drop(Box::from_raw(lora));
    }
}

/// `out = W0 x + sum_i scale_i B_i A_i (mask_i ⊙ x)`.
///
/// `w0` is `d x k`, `x` is `k x c` and `out` is `d x c`, all row-major.
/// `masks[i]` holds `c` bytes (nonzero = token bound to adapter `i`) or is
/// NULL to bind every token.
///
/// # Safety
/// Every pointer must reference buffers of the sizes above; `loras` and
/// `masks` hold `n` entries (`masks` may itself be NULL).
#[no_mangle]
pub unsafe extern "C" fn sv_lora_apply(
    w0: *const f64,
    d: usize,
    k: usize,
    loras: *const *const SvLora,
    masks: *const *const u8,
    n: usize,
    x: *const f64,
    c: usize,
    out: *mut f64,
) -> SvStatus {
    guard(|| {
        let w0 = matrix(w0, d, k, "w0")?;
        let x = matrix(x, k, c, "x")?;
        let handles = slice(loras, n, "loras")?;
        let mask_ptrs: Vec<*const u8> = if masks.is_null() {
            vec![std::ptr::null(); n]
        } else {
            slice(masks, n, "masks")?.to_vec()
        };
        let mut owned_masks = Vec::with_capacity(n);
        for &m in &mask_ptrs {
            owned_masks.push(if m.is_null() {
                vec![true; c]
            } else {
                slice(m, c, "mask")?.iter().map(|&v| v != 0).collect()
            });
        }
        let mut bindings = Vec::with_capacity(n);
        for (i, &h) in handles.iter().enumerate() {
            bindings.push((&non_null(h, "lora")?.0, owned_masks[i].as_slice()));
        }
        let y = lora_apply(&w0, &bindings, &x).map_err(|e| Failure::new(SvStatus::InvalidArgument, e))?;
        if out.is_null() {
            return Err(Failure::new(SvStatus::NullPointer, "out is null"));
        }
        let dst = std::slice::from_raw_parts_mut(out, d * c);
        for (o, v) in dst.iter_mut().zip(y.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
