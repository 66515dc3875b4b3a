use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use storyvid_ffi::*;

const FRAME_PLAN: &str = include_str!("../../core/fixtures/coral_reef_frame_plan.txt");
const TEDDY: &str = include_str!("../../core/fixtures/teddy_frame_plan.txt");

fn last_error() -> String {
    let p = sv_last_error();
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { sv_string_free(p) };
    s
}

fn parse(text: &str) -> *mut SvFramePlan {
    let c = CString::new(text).unwrap();
    let mut plan = ptr::null_mut();
    assert_eq!(unsafe { sv_frame_plan_parse(c.as_ptr(), &mut plan) }, SvStatus::Ok);
    plan
}

#[test]
fn plan_round_trip_and_lint() {
    let plan = parse(FRAME_PLAN);
    unsafe {
        assert_eq!(sv_frame_plan_key_frames(plan), 6);
        let (mut errors, mut warnings) = (99, 99);
        assert_eq!(sv_frame_plan_lint(plan, &mut errors, &mut warnings), SvStatus::Ok);
        assert_eq!(errors, 0);
        let text = sv_frame_plan_emit(plan);
        let emitted = CStr::from_ptr(text).to_str().unwrap().to_owned();
        sv_string_free(text);
        let again = parse(&emitted);
        let text2 = sv_frame_plan_emit(again);
        assert_eq!(CStr::from_ptr(text2).to_str().unwrap(), emitted);
        sv_string_free(text2);
        sv_frame_plan_free(again);
        sv_frame_plan_free(plan);
    }
}

#[test]
fn errors_are_reported() {
    let bad = CString::new("no plan here").unwrap();
    let mut plan = ptr::null_mut();
    unsafe {
        assert_eq!(sv_frame_plan_parse(bad.as_ptr(), &mut plan), SvStatus::Parse);
        assert!(plan.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(sv_frame_plan_parse(ptr::null(), &mut plan), SvStatus::NullPointer);
        assert!(last_error().contains("text"));
        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(
            sv_frame_plan_parse(invalid.as_ptr().cast(), &mut plan),
            SvStatus::InvalidUtf8
        );
        let mut out = ptr::null_mut();
        assert_eq!(
            sv_region_map_from_bits(1, 1, 1, 65, [1u64].as_ptr(), &mut out),
            SvStatus::OutOfRange
        );
        assert_eq!(
            sv_region_map_from_bits(1, 1, 1, 1, [2u64].as_ptr(), &mut out),
            SvStatus::OutOfRange
        );
        sv_frame_plan_free(ptr::null_mut());
        sv_mask_free(ptr::null_mut());
        assert_eq!(sv_mask_size(ptr::null()), 0);
    }
}

#[test]
fn plan_to_mask_pipeline() {
    let plan = parse(TEDDY);
    unsafe {
        let mut latent = ptr::null_mut();
        assert_eq!(sv_interpolate(plan, 12, &mut latent), SvStatus::Ok);
        assert_eq!(sv_latent_plan_conditions(latent), 4);
        let mut map = ptr::null_mut();
        assert_eq!(
            sv_region_map_build(latent, 11, 4, 4, &mut map),
            SvStatus::InvalidArgument
        );
        assert_eq!(sv_region_map_build(latent, 12, 4, 4, &mut map), SvStatus::Ok);
        assert_eq!(sv_region_map_tokens(map), 192);
        let segs = [3usize, 4, 4, 2];
        let mut mask = ptr::null_mut();
        assert_eq!(
            sv_mask_build(map, segs.as_ptr(), 3, SvMaskMode::Sr3a, &mut mask),
            SvStatus::InvalidArgument
        );
        assert_eq!(
            sv_mask_build(map, segs.as_ptr(), 4, SvMaskMode::Dense, &mut mask),
            SvStatus::Ok
        );
        let s = sv_mask_size(mask);
        assert_eq!(s, 13 + 192);
        let (mut buf, mut len) = (ptr::null_mut(), 0usize);
        assert_eq!(
            sv_mask_export(mask, SvMaskFormat::Bitset, &mut buf, &mut len),
            SvStatus::Ok
        );
        assert_eq!(len, 9 + s * s.div_ceil(64) * 8);
        assert_eq!(&std::slice::from_raw_parts(buf, 4), b"SR3A");
        assert_eq!(*buf.add(8), 2);
        sv_bytes_free(buf, len);
        let mut allowed = false;
        for q in [0, 5, s - 1] {
            assert_eq!(sv_mask_query(mask, q, 0, &mut allowed), SvStatus::Ok);
            assert!(allowed);
        }
        sv_mask_free(mask);
        sv_region_map_free(map);
        sv_latent_plan_free(latent);
        sv_frame_plan_free(plan);
    }
}

#[test]
fn lora_apply_matches_core() {
    use ndarray::Array2;
    use storyvid::lora::{lora_apply, LoraKind, LoraModule, LoraRole};
    let (d, k, r, c) = (3, 4, 2, 5);
    let w0: Vec<f64> = (0..d * k).map(|i| i as f64 * 0.25 - 1.0).collect();
    let a: Vec<f64> = (0..r * k).map(|i| (i as f64).sin()).collect();
    let b: Vec<f64> = (0..d * r).map(|i| (i as f64).cos()).collect();
    let x: Vec<f64> = (0..k * c).map(|i| i as f64 / 7.0).collect();
    let mask = [1u8, 0, 1, 1, 0];
    let mut handle = ptr::null_mut();
    let mut out = vec![0.0; d * c];
    unsafe {
        assert_eq!(
            sv_lora_new(d, k, r, a.as_ptr(), b.as_ptr(), 0.5, &mut handle),
            SvStatus::Ok
        );
        let loras = [handle as *const SvLora];
        let masks = [mask.as_ptr()];
        assert_eq!(
            sv_lora_apply(
                w0.as_ptr(),
                d,
                k,
                loras.as_ptr(),
                masks.as_ptr(),
                1,
                x.as_ptr(),
                c,
                out.as_mut_ptr()
            ),
            SvStatus::Ok
        );
        assert_eq!(
            sv_lora_apply(
                w0.as_ptr(),
                d,
                k + 1,
                loras.as_ptr(),
                masks.as_ptr(),
                1,
                x.as_ptr(),
                c,
                out.as_mut_ptr()
            ),
            SvStatus::InvalidArgument
        );
        sv_lora_free(handle);
    }
    let module = LoraModule::from_parts(
        Array2::from_shape_vec((r, k), a).unwrap(),
        Array2::from_shape_vec((d, r), b).unwrap(),
        0.5,
        LoraRole::Spatial,
        LoraKind::Subject,
    )
    .unwrap();
    let bools: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
    let want = lora_apply(
        &Array2::from_shape_vec((d, k), w0).unwrap(),
        &[(&module, &bools)],
        &Array2::from_shape_vec((k, c), x).unwrap(),
    )
    .unwrap();
    assert_eq!(out, want.iter().copied().collect::<Vec<_>>());
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header_dir = crate_dir.join("include");
    assert!(header_dir.join("storyvid.h").exists());
    let lib = target_dir().join("libstoryvid_ffi.a");
    if !lib.exists() {
        eprintln!("skipping link step: {} not built", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("c_abi");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg(crate_dir.join("tests/c_abi.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("cc available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok 0.1.0"));
}
