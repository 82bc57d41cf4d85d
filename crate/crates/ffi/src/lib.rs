//! C ABI over the `m2fn` crate: load a trained checkpoint behind an opaque
//! handle and run eval-mode inference on caller-owned buffers.
//!
//! Every fallible function returns an [`M2fnStatus`]. On failure the
//! message is kept per thread and read with [`m2fn_last_error`]. Panics are
//! caught at the boundary and reported as `M2FN_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use m2fn::model::{HeadKind, M2fn};
use m2fn::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum M2fnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct M2fnModel {
    model: M2fn,
}

/// Static facts about a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct M2fnModelInfo {
    /// Square image side; images are `[3, image_size, image_size]`.
    pub image_size: usize,
    /// Width of one aux row (0 when aux is off).
    pub dim_aux: usize,
    /// Values per prediction: 1 for the scalar head, 10 for the
    /// distribution head.
    pub outputs: usize,
    /// Positions in an attention map (0 when attention is off).
    pub attention_positions: usize,
    /// Bit 0 aux, bit 1 low, bit 2 att, bit 3 high.
    pub toggles: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: M2fnStatus, msg: impl Into<String>) -> M2fnStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> M2fnStatus {
    let status = match &e {
        Error::Io { .. } => M2fnStatus::Io,
        Error::Format(_) => M2fnStatus::Format,
        Error::Tensor(_) | Error::Layer { .. } => M2fnStatus::Shape,
        _ => M2fnStatus::Config,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> M2fnStatus) -> M2fnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(M2fnStatus::Panic, format!("panic: {msg}"))
        }
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn m2fn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn m2fn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `m2fn train` (or `M2fn::save`). On success
/// `*out` owns a handle to release with [`m2fn_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn m2fn_model_load(path: *const c_char, out: *mut *mut M2fnModel) -> M2fnStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(M2fnStatus::NullPointer, "path and out must not be NULL");
        }
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(M2fnStatus::InvalidArgument, "path is not valid UTF-8");
        };
        match M2fn::load(Path::new(p)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(M2fnModel { model }));
                M2fnStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`m2fn_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn m2fn_model_free(model: *mut M2fnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn info_of(m: &M2fn) -> M2fnModelInfo {
    let c = m.config();
    let t = c.toggles;
    let positions = match (t.att, c.feature_map_size()) {
        (true, Ok((side, _))) => side * side,
        _ => 0,
    };
    M2fnModelInfo {
        image_size: c.image_size,
        dim_aux: if t.aux { c.dim_aux } else { 0 },
        outputs: c.head.outputs(),
        attention_positions: positions,
        toggles: u32::from(t.aux) | u32::from(t.low) << 1 | u32::from(t.att) << 2 | u32::from(t.high) << 3,
    }
}

/// # Safety
/// `model` and `info` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn m2fn_model_info(model: *const M2fnModel, info: *mut M2fnModelInfo) -> M2fnStatus {
    guard(|| {
        if model.is_null() || info.is_null() {
            return fail(M2fnStatus::NullPointer, "model and info must not be NULL");
        }
        *info = info_of(&(*model).model);
        M2fnStatus::Ok
    })
}

/// 1 for a distribution head, 0 for a scalar head, -1 for NULL.
///
/// # Safety
/// `model` must be NULL or a valid handle.
#[no_mangle]
pub unsafe extern "C" fn m2fn_model_is_distribution(model: *const M2fnModel) -> i32 {
    match model.as_ref() {
        None => -1,
        Some(m) => i32::from(m.model.config().head == HeadKind::Distribution),
    }
}

/// Eval-mode forward pass over `n` images.
///
/// `images` holds `n * 3 * S * S` values (row-major `[N, 3, S, S]`), `aux`
/// holds `n * dim_aux` values or is NULL when the model has no aux input.
/// `out` receives `n * outputs` values. `attention` may be NULL; otherwise
/// it receives `n * attention_positions` values (the model must have
/// attention on).
///
/// # Safety
/// Every non-NULL buffer must be valid for the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn m2fn_model_predict(
    model: *const M2fnModel,
    images: *const f64,
    n: usize,
    aux: *const f64,
    out: *mut f64,
    attention: *mut f64,
) -> M2fnStatus {
    guard(|| {
        if model.is_null() || images.is_null() || out.is_null() {
            return fail(M2fnStatus::NullPointer, "model, images and out must not be NULL");
        }
        if n == 0 {
            return fail(M2fnStatus::InvalidArgument, "n must be positive");
        }
        let m = &(*model).model;
        let info = info_of(m);
        let s = info.image_size;
        let img = std::slice::from_raw_parts(images, n * 3 * s * s).to_vec();
        let img = match Tensor::new(vec![n, 3, s, s], img) {
            Ok(t) => t,
            Err(e) => return from_error(e.into()),
        };
        let aux_t = match (info.dim_aux, aux.is_null()) {
            (0, true) => None,
            (0, false) => return fail(M2fnStatus::InvalidArgument, "model has no aux input; pass NULL"),
            (_, true) => return fail(M2fnStatus::NullPointer, "model needs an aux buffer"),
            (d, false) => {
                let a = std::slice::from_raw_parts(aux, n * d).to_vec();
                match Tensor::new(vec![n, d], a) {
                    Ok(t) => Some(t),
                    Err(e) => return from_error(e.into()),
                }
            }
        };
        if !attention.is_null() && info.attention_positions == 0 {
            return fail(M2fnStatus::InvalidArgument, "model has no attention map; pass NULL");
        }
        let (pred, attn) = match m.run(&img, aux_t.as_ref(), m2fn::tensor::Mode::Eval) {
            Ok(r) => r,
            Err(e) => return from_error(e),
        };
        std::slice::from_raw_parts_mut(out, pred.numel()).copy_from_slice(pred.data());
        if let (false, Some(a)) = (attention.is_null(), attn) {
            std::slice::from_raw_parts_mut(attention, a.numel()).copy_from_slice(a.data());
        }
        M2fnStatus::Ok
    })
}
