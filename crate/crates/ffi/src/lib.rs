//! C ABI over the chroma model: load a checkpoint, query its vocabulary and
//! classify RGB images.
//!
//! Every function returns a [`ChromaStatus`]. On failure a message is kept
//! per thread and can be read with [`chroma_last_error`]. Handles are opaque
//! and must be released with [`chroma_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use chroma::checkpoint::Checkpoint;
use chroma::commands::exit_code;
use chroma::data::resize_bilinear;
use chroma::train::Model;
use chroma::{Error, Tensor};

/// Result of every call. Values 1 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChromaStatus {
    Ok = 0,
    /// A self-check failed.
    CheckFailed = 1,
    /// A file could not be read or is malformed.
    Io = 2,
    /// A computation produced non-finite values.
    Diverged = 3,
    /// Incompatible configuration, size or vocabulary.
    Config = 4,
    /// A required pointer was null.
    NullPointer = 5,
    /// An output buffer is too small; the required size was written.
    BufferTooSmall = 6,
    /// An argument is out of range or not valid UTF-8.
    InvalidArgument = 7,
    /// An internal panic was caught at the boundary.
    Panic = 8,
}

/// Loaded model. Opaque to C.
pub struct ChromaModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: ChromaStatus, msg: impl Into<String>) -> ChromaStatus {
    set_error(msg);
    status
}

fn from_error(e: &Error) -> ChromaStatus {
    let status = match exit_code(e) {
        1 => ChromaStatus::CheckFailed,
        2 => ChromaStatus::Io,
        3 => ChromaStatus::Diverged,
        4 => ChromaStatus::Config,
        _ => ChromaStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> ChromaStatus) -> ChromaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(ChromaStatus::Panic, "internal panic"),
    }
}

/// Message describing the most recent failure on this thread, or an empty
/// string if none. Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn chroma_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn chroma_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chroma_model_load(path: *const c_char, out: *mut *mut ChromaModel) -> ChromaStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(ChromaStatus::NullPointer, "path and out must not be null");
        }
        *out = ptr::null_mut();
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(ChromaStatus::InvalidArgument, "path is not valid UTF-8");
        };
        match Checkpoint::load(Path::new(p)).and_then(|c| Model::from_checkpoint(&c)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(ChromaModel { model }));
                ChromaStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Releases a handle from [`chroma_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn chroma_model_free(model: *mut ChromaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of color names in the model's vocabulary.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chroma_model_num_classes(model: *const ChromaModel, out: *mut usize) -> ChromaStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(ChromaStatus::NullPointer, "model and out must not be null");
        }
        *out = (*model).model.vocabulary.len();
        ChromaStatus::Ok
    })
}

/// Copies color name `index` into `buf` as a NUL-terminated string.
/// `*needed` receives the size including the terminator; when `buf_len` is
/// smaller, nothing is copied and `BufferTooSmall` is returned.
///
/// # Safety
/// `model` must be a live handle, `needed` valid, and `buf` valid for
/// `buf_len` bytes (it may be null when `buf_len` is 0).
#[no_mangle]
pub unsafe extern "C" fn chroma_model_class_name(
    model: *const ChromaModel,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> ChromaStatus {
    guard(|| {
        if model.is_null() || needed.is_null() {
            return fail(ChromaStatus::NullPointer, "model and needed must not be null");
        }
        let vocab = &(*model).model.vocabulary;
        if index >= vocab.len() {
            return fail(ChromaStatus::InvalidArgument, format!("class {index} out of range for {}", vocab.len()));
        }
        let name = vocab.name(index).as_bytes();
        *needed = name.len() + 1;
        if buf.is_null() || buf_len < name.len() + 1 {
            return fail(ChromaStatus::BufferTooSmall, format!("class name needs {} bytes", name.len() + 1));
        }
        ptr::copy_nonoverlapping(name.as_ptr().cast(), buf, name.len());
        *buf.add(name.len()) = 0;
        ChromaStatus::Ok
    })
}

/// Classifies a `height x width` RGB image given as interleaved 8-bit
/// samples, row-major.
///
/// Writes the image-level distribution into `probabilities`
/// (`num_classes` entries) and its argmax into `predicted`. Optional
/// outputs (null to skip): `attention` receives `width * height` values of
/// the attention map at image size, `names` the per-pixel color name index.
///
/// # Safety
/// `rgb` must hold `3 * width * height` bytes; every non-null output must be
/// valid for the length given.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn chroma_model_predict(
    model: *const ChromaModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    probabilities: *mut f64,
    probabilities_len: usize,
    predicted: *mut usize,
    attention: *mut f32,
    names: *mut u32,
) -> ChromaStatus {
    guard(|| {
        if model.is_null() || rgb.is_null() || probabilities.is_null() || predicted.is_null() {
            return fail(ChromaStatus::NullPointer, "model, rgb, probabilities and predicted must not be null");
        }
        let model = &(*model).model;
        let classes = model.vocabulary.len();
        if probabilities_len < classes {
            return fail(ChromaStatus::BufferTooSmall, format!("probabilities needs {classes} entries"));
        }
        let Some(n) = width.checked_mul(height).filter(|&n| n > 0) else {
            return fail(ChromaStatus::InvalidArgument, "image must be non-empty");
        };
        let bytes = std::slice::from_raw_parts(rgb, 3 * n);
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        let image = match Tensor::new(&[height, width, 3], data) {
            Ok(t) => t,
            Err(e) => return from_error(&e),
        };
        let (y, a, score) = match model.predict(&image) {
            Ok(r) => r,
            Err(e) => return from_error(&e),
        };
        std::slice::from_raw_parts_mut(probabilities, classes).copy_from_slice(score.probabilities());
        *predicted = score.argmax();
        if !attention.is_null() {
            let a = a.tensor();
            let full = if a.shape() == [height, width] {
                a.clone()
            } else {
                match a.clone().reshape(&[a.shape()[0], a.shape()[1], 1]).and_then(|t| resize_bilinear(&t, height, width)) {
                    Ok(t) => t,
                    Err(e) => return from_error(&e),
                }
            };
            let out = std::slice::from_raw_parts_mut(attention, n);
            for (o, &v) in out.iter_mut().zip(full.data()) {
                *o = v as f32;
            }
        }
        if !names.is_null() {
            let out = std::slice::from_raw_parts_mut(names, n);
            for (o, k) in out.iter_mut().zip(y.argmax()) {
                *o = k as u32;
            }
        }
        ChromaStatus::Ok
    })
}

/// Runs the finite-difference gradient suite. `*passed` is 1 when every
/// check passes and 0 otherwise.
///
/// # Safety
/// `passed` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chroma_gradcheck(passed: *mut i32) -> ChromaStatus {
    guard(|| {
        if passed.is_null() {
            return fail(ChromaStatus::NullPointer, "passed must not be null");
        }
        match chroma::selfcheck::run_suite() {
            Ok(r) => {
                *passed = r.passed() as i32;
                if !r.passed() {
                    set_error(r.to_text());
                }
                ChromaStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}
