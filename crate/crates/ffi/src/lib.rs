//! C ABI over the model: load a model file, compute image descriptors and
//! predict classes.
//!
//! Every call returns a [`DdsflStatus`]. On failure a message is kept per
//! thread and can be read with [`ddsfl_last_error`]. Panics are caught at
//! the boundary and reported as [`DdsflStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ddsfl::dataio::GrayImage;
use ddsfl::deepstack::{load_model, DeepModel};
use ddsfl::encode::{describe_image, descriptor_len};
use ddsfl::Error;

/// Opaque handle to a loaded model.
pub struct DdsflModel {
    inner: DeepModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdsflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    /// The model lacks codebooks or a classifier.
    Incomplete = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("interior nul removed"));
}

fn status_of(e: &Error) -> DdsflStatus {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::MissingArtifact { .. } => DdsflStatus::Io,
        Error::Format(_) | Error::Parse { .. } => DdsflStatus::Format,
        Error::Numeric(_) | Error::NonFinite(_) => DdsflStatus::Numeric,
        _ => DdsflStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DdsflStatus, String)>) -> DdsflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DdsflStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DdsflStatus::Panic
        }
    }
}

fn fail(e: Error) -> (DdsflStatus, String) {
    (status_of(&e), e.to_string())
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn ddsfl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model file and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ddsfl_model_load(path: *const c_char, out: *mut *mut DdsflModel) -> DdsflStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err((DdsflStatus::NullPointer, "null argument".into()));
        }
        // SAFETY: non-null and NUL-terminated per the contract above.
        let p = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (DdsflStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = load_model(Path::new(p)).map_err(fail)?;
        let handle = Box::into_raw(Box::new(DdsflModel { inner: model }));
        // SAFETY: `out` is non-null and writable per the contract above.
        unsafe { *out = handle };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`ddsfl_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ddsfl_model_free(model: *mut DdsflModel) {
    if !model.is_null() {
        // SAFETY: the pointer was produced by Box::into_raw in ddsfl_model_load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be null or a live handle.
unsafe fn model_ref<'a>(model: *const DdsflModel) -> Option<&'a DeepModel> {
    // SAFETY: guaranteed by the caller.
    unsafe { model.as_ref() }.map(|m| &m.inner)
}

/// Number of layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddsfl_model_num_layers(model: *const DdsflModel) -> usize {
    unsafe { model_ref(model) }.map_or(0, |m| m.layers.len())
}

/// Number of classes, or 0 when the model has no classifier.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddsfl_model_num_classes(model: *const DdsflModel) -> usize {
    unsafe { model_ref(model) }
        .and_then(|m| m.classifier.as_ref())
        .map_or(0, |c| c.num_classes())
}

/// Length of the descriptor [`ddsfl_describe_gray8`] writes, or 0 when the
/// model has no codebooks.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddsfl_model_descriptor_len(model: *const DdsflModel) -> usize {
    unsafe { model_ref(model) }.map_or(0, descriptor_len)
}

/// # Safety
/// `pixels` must point to `width * height` readable bytes.
unsafe fn image_from_gray8(pixels: *const u8, width: usize, height: usize) -> Result<GrayImage, (DdsflStatus, String)> {
    if pixels.is_null() {
        return Err((DdsflStatus::NullPointer, "null pixel buffer".into()));
    }
    let n = width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or((DdsflStatus::InvalidArgument, "image size is zero or overflows".to_string()))?;
    // SAFETY: the caller guarantees `n` readable bytes.
    let bytes = unsafe { std::slice::from_raw_parts(pixels, n) };
    GrayImage::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect()).map_err(fail)
}

/// Computes the descriptor of an 8-bit grayscale image (row-major,
/// `width * height` bytes) into `out`, which must hold at least
/// `out_len >= ddsfl_model_descriptor_len(model)` values.
///
/// # Safety
/// `model` must be a live handle, `pixels` must point to `width * height`
/// readable bytes and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ddsfl_describe_gray8(
    model: *const DdsflModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
    out_len: usize,
) -> DdsflStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }.ok_or((DdsflStatus::NullPointer, "null model".to_string()))?;
        if out.is_null() {
            return Err((DdsflStatus::NullPointer, "null output buffer".into()));
        }
        if m.codebooks.is_empty() {
            return Err((DdsflStatus::Incomplete, "model has no codebooks".into()));
        }
        let need = descriptor_len(m);
        if out_len < need {
            return Err((DdsflStatus::BufferTooSmall, format!("output needs {need} values, got {out_len}")));
        }
        let img = unsafe { image_from_gray8(pixels, width, height) }?;
        let d = describe_image(&img, m).map_err(fail)?;
        // SAFETY: `out` holds at least `need == d.len()` doubles.
        unsafe { ptr::copy_nonoverlapping(d.as_ptr(), out, d.len()) };
        Ok(())
    })
}

/// Predicts the class of an 8-bit grayscale image into `*class_id`.
///
/// # Safety
/// `model` must be a live handle, `pixels` must point to `width * height`
/// readable bytes and `class_id` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ddsfl_predict_gray8(
    model: *const DdsflModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    class_id: *mut u32,
) -> DdsflStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }.ok_or((DdsflStatus::NullPointer, "null model".to_string()))?;
        if class_id.is_null() {
            return Err((DdsflStatus::NullPointer, "null output".into()));
        }
        let c = m
            .classifier
            .as_ref()
            .ok_or((DdsflStatus::Incomplete, "model has no classifier".to_string()))?;
        let img = unsafe { image_from_gray8(pixels, width, height) }?;
        let d = describe_image(&img, m).map_err(fail)?;
        let k = c.predict(&d).map_err(fail)?;
        // SAFETY: non-null and writable per the contract above.
        unsafe { *class_id = k as u32 };
        Ok(())
    })
}
