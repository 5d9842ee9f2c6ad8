//! C interface to a frozen generator: load a checkpoint, synthesize PNGs
//! from layout JSON documents.
//!
//! Every function returns an [`IslaStatus`]. On failure a description is
//! available from [`isla_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use isla_core::layout::LayoutFile;
use isla_core::objectives::load_checkpoint;
use isla_core::service::{Model, Rendered, RenderError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IslaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Checkpoint = 3,
    InvalidLayout = 4,
    ResolutionMismatch = 5,
    OutOfRange = 6,
    Internal = 7,
}

/// A loaded generator.
pub struct IslaModel {
    model: Model,
}

/// PNG outputs of one synthesis call.
pub struct IslaResult {
    rendered: Rendered,
    style_json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: IslaStatus, message: impl Into<String>) -> IslaStatus {
    let text = CString::new(message.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
    status
}

fn guard(f: impl FnOnce() -> IslaStatus) -> IslaStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(IslaStatus::Internal, "panic inside isla"))
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, IslaStatus> {
    if p.is_null() {
        return Err(fail(IslaStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|e| fail(IslaStatus::InvalidUtf8, e.to_string()))
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn isla_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. With `alpha_zero`, every mask blend weight is forced
/// to zero.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn isla_model_load(path: *const c_char, alpha_zero: bool, out: *mut *mut IslaModel) -> IslaStatus {
    guard(|| {
        if out.is_null() {
            return fail(IslaStatus::NullPointer, "null output handle");
        }
        *out = ptr::null_mut();
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let model = load_checkpoint(Path::new(path))
            .map_err(|e| e.to_string())
            .and_then(|c| Model::from_checkpoint(&c, alpha_zero).map_err(|e| e.to_string()));
        match model {
            Ok(model) => {
                *out = Box::into_raw(Box::new(IslaModel { model }));
                IslaStatus::Ok
            }
            Err(e) => fail(IslaStatus::Checkpoint, e),
        }
    })
}

/// # Safety
/// `model` must come from [`isla_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn isla_model_free(model: *mut IslaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the images the model produces.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn isla_model_resolution(model: *const IslaModel, out: *mut u32) -> IslaStatus {
    if model.is_null() || out.is_null() {
        return fail(IslaStatus::NullPointer, "null argument");
    }
    *out = (*model).model.resolution() as u32;
    IslaStatus::Ok
}

/// Synthesizes the layout document `layout_json`.
///
/// # Safety
/// `model` must be a live handle, `layout_json` a NUL-terminated string and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn isla_synthesize(
    model: *const IslaModel,
    layout_json: *const c_char,
    out: *mut *mut IslaResult,
) -> IslaStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(IslaStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let text = match str_arg(layout_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let file = match LayoutFile::parse(text) {
            Ok(f) => f,
            Err(e) => return fail(IslaStatus::InvalidLayout, e.to_string()),
        };
        match (*model).model.render(&file) {
            Ok(rendered) => {
                let style = serde_json::to_string(&rendered.style).expect("style serializes");
                let style_json = CString::new(style).expect("json has no nul bytes");
                *out = Box::into_raw(Box::new(IslaResult { rendered, style_json }));
                IslaStatus::Ok
            }
            Err(RenderError::Invalid(v)) => {
                fail(IslaStatus::InvalidLayout, v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))
            }
            Err(RenderError::Mismatch(m)) => fail(IslaStatus::ResolutionMismatch, m),
            Err(RenderError::Internal(m)) => fail(IslaStatus::Internal, m),
        }
    })
}

/// # Safety
/// `result` must come from [`isla_synthesize`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn isla_result_free(result: *mut IslaResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

unsafe fn bytes_out(bytes: &[u8], data: *mut *const u8, len: *mut usize) -> IslaStatus {
    if data.is_null() || len.is_null() {
        return fail(IslaStatus::NullPointer, "null argument");
    }
    *data = bytes.as_ptr();
    *len = bytes.len();
    IslaStatus::Ok
}

/// RGB image as PNG bytes, owned by `result`.
///
/// # Safety
/// `result` must be a live handle; `data` and `len` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn isla_result_image(result: *const IslaResult, data: *mut *const u8, len: *mut usize) -> IslaStatus {
    match result.as_ref() {
        Some(r) => bytes_out(&r.rendered.image_png, data, len),
        None => fail(IslaStatus::NullPointer, "null result"),
    }
}

/// Colour-coded label map as PNG bytes, owned by `result`.
///
/// # Safety
/// `result` must be a live handle; `data` and `len` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn isla_result_label_map(result: *const IslaResult, data: *mut *const u8, len: *mut usize) -> IslaStatus {
    match result.as_ref() {
        Some(r) => bytes_out(&r.rendered.label_png, data, len),
        None => fail(IslaStatus::NullPointer, "null result"),
    }
}

/// Number of foreground instance masks.
///
/// # Safety
/// `result` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn isla_result_mask_count(result: *const IslaResult, out: *mut usize) -> IslaStatus {
    match (result.as_ref(), out.is_null()) {
        (Some(r), false) => {
            *out = r.rendered.mask_pngs.len();
            IslaStatus::Ok
        }
        _ => fail(IslaStatus::NullPointer, "null argument"),
    }
}

/// Soft mask of foreground instance `index` as grayscale PNG bytes.
///
/// # Safety
/// `result` must be a live handle; `data` and `len` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn isla_result_mask(
    result: *const IslaResult,
    index: usize,
    data: *mut *const u8,
    len: *mut usize,
) -> IslaStatus {
    let Some(r) = result.as_ref() else {
        return fail(IslaStatus::NullPointer, "null result");
    };
    match r.rendered.mask_pngs.get(index) {
        Some(m) => bytes_out(m, data, len),
        None => fail(IslaStatus::OutOfRange, format!("mask {index} of {}", r.rendered.mask_pngs.len())),
    }
}

/// Effective style seeds as a JSON object, owned by `result`.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn isla_result_style(result: *const IslaResult) -> *const c_char {
    match result.as_ref() {
        Some(r) => r.style_json.as_ptr(),
        None => ptr::null(),
    }
}
