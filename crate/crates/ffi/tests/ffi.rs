use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use m2fn::model::{HeadKind, M2fn, ModelConfig, StageSpec, Toggles};
use m2fn::tensor::Mode;
use m2fn::Tensor;
use m2fn_ffi::*;

fn small_model(toggles: Toggles, head: HeadKind) -> M2fn {
    let mut c = ModelConfig::new(5).with_toggles(toggles);
    c.backbone = vec![StageSpec::new(4), StageSpec::new(6)];
    c.image_size = 12;
    c.cbn_hidden = 4;
    c.attn_hidden = 4;
    c.high_dim = 6;
    c.head = head;
    c.seed = 11;
    M2fn::build(c).unwrap()
}

fn ramp(n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
}

fn load(path: &Path) -> *mut M2fnModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { m2fn_model_load(c.as_ptr(), &mut h) }, M2fnStatus::Ok);
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    let p = m2fn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn predictions_match_the_rust_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = small_model(Toggles::ALL_ON, HeadKind::Scalar);
    model.save(&path).unwrap();
    let h = load(&path);

    let mut info = M2fnModelInfo::default();
    assert_eq!(unsafe { m2fn_model_info(h, &mut info) }, M2fnStatus::Ok);
    assert_eq!((info.image_size, info.dim_aux, info.outputs, info.toggles), (12, 5, 1, 0b1111));
    assert_eq!(info.attention_positions, 9);
    assert_eq!(unsafe { m2fn_model_is_distribution(h) }, 0);

    let n = 3;
    let images = ramp(n * 3 * 12 * 12, 1.0);
    let aux = ramp(n * 5, 2.0);
    let mut out = vec![f64::NAN; n];
    let mut attn = vec![f64::NAN; n * 9];
    let st = unsafe { m2fn_model_predict(h, images.as_ptr(), n, aux.as_ptr(), out.as_mut_ptr(), attn.as_mut_ptr()) };
    assert_eq!(st, M2fnStatus::Ok);

    let (want, want_attn) = model
        .run(
            &Tensor::new(vec![n, 3, 12, 12], images).unwrap(),
            Some(&Tensor::new(vec![n, 5], aux).unwrap()),
            Mode::Eval,
        )
        .unwrap();
    assert_eq!(out, want.data());
    assert_eq!(attn, want_attn.unwrap().data());
    for row in attn.chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    unsafe { m2fn_model_free(h) };
}

#[test]
fn image_only_distribution_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    small_model(Toggles::ALL_OFF, HeadKind::Distribution).save(&path).unwrap();
    let h = load(&path);
    let mut info = M2fnModelInfo::default();
    unsafe { m2fn_model_info(h, &mut info) };
    assert_eq!((info.dim_aux, info.outputs, info.attention_positions, info.toggles), (0, 10, 0, 0));
    assert_eq!(unsafe { m2fn_model_is_distribution(h) }, 1);

    let images = ramp(2 * 3 * 12 * 12, 1.0);
    let mut out = vec![0.0; 20];
    let st = unsafe { m2fn_model_predict(h, images.as_ptr(), 2, ptr::null(), out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, M2fnStatus::Ok);
    for row in out.chunks(10) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let aux = [0.0; 10];
    let st = unsafe { m2fn_model_predict(h, images.as_ptr(), 2, aux.as_ptr(), out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, M2fnStatus::InvalidArgument);
    let mut attn = [0.0; 8];
    let st = unsafe { m2fn_model_predict(h, images.as_ptr(), 2, ptr::null(), out.as_mut_ptr(), attn.as_mut_ptr()) };
    assert_eq!(st, M2fnStatus::InvalidArgument);
    assert!(last_error().contains("attention"));
    unsafe { m2fn_model_free(h) };
}

#[test]
fn error_codes_and_messages() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { m2fn_model_load(ptr::null(), &mut h) }, M2fnStatus::NullPointer);
    assert!(last_error().contains("NULL"));

    let missing = CString::new("/nonexistent/model.json").unwrap();
    assert_eq!(unsafe { m2fn_model_load(missing.as_ptr(), &mut h) }, M2fnStatus::Io);
    assert!(last_error().contains("/nonexistent/model.json"));
    assert!(h.is_null());

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    let c = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { m2fn_model_load(c.as_ptr(), &mut h) }, M2fnStatus::Format);

    let path = dir.path().join("model.json");
    small_model(Toggles::new(true, false, false, false), HeadKind::Scalar).save(&path).unwrap();
    let h = load(&path);
    let images = ramp(3 * 12 * 12, 1.0);
    let mut out = [0.0; 1];
    let st = unsafe { m2fn_model_predict(h, images.as_ptr(), 1, ptr::null(), out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, M2fnStatus::NullPointer);
    let st = unsafe { m2fn_model_predict(h, images.as_ptr(), 0, ptr::null(), out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, M2fnStatus::InvalidArgument);
    assert_eq!(unsafe { m2fn_model_is_distribution(ptr::null()) }, -1);
    unsafe { m2fn_model_free(h) };
    unsafe { m2fn_model_free(ptr::null_mut()) };
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(m2fn_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_exports_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/m2fn.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "m2fn_last_error",
        "m2fn_version",
        "m2fn_model_load",
        "m2fn_model_free",
        "m2fn_model_info",
        "m2fn_model_is_distribution",
        "m2fn_model_predict",
        "typedef struct M2fnModel M2fnModel;",
        "M2FN_STATUS_PANIC = 7",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    // a C compiler is part of the build toolchain on every supported host
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-std=c99", "-x", "c"])
        .arg(&header)
        .status()
        .unwrap_or_else(|e| panic!("running {cc}: {e}"));
    assert!(status.success());
}
