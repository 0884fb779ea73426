//! C ABI over the core library: opaque handles, integer status codes, and a
//! thread-local last-error message. Every function returns a `CarimeStatus`;
//! out-parameters are written only on `CARIME_STATUS_OK`.

use std::cell::RefCell;
use std::ffi::{CStr, CString, c_char, c_double, c_float, c_int};
use std::path::PathBuf;

use carime_core::trainer::{TrainConfig, load_styler_for_inference, load_warper_for_inference};
use carime_core::{DeformationField, Error, ImageBuffer, LandmarkSet};

/// Result code of every FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarimeStatus {
    Ok = 0,
    InvalidArgument = 1,
    Io = 2,
    Shape = 3,
    Dataset = 4,
    Config = 5,
    Checkpoint = 6,
    Numeric = 7,
    Internal = 8,
    NullPointer = 9,
}

/// Opaque 17-point landmark set.
pub struct CarimeLandmarks(LandmarkSet);
/// Opaque dense deformation field.
pub struct CarimeField(DeformationField);
/// Opaque RGB image.
pub struct CarimeImage(ImageBuffer);
/// Opaque warper model handle.
pub struct CarimeWarper {
    warper: carime_core::warper::Warper,
    config: TrainConfig,
}
/// Opaque styler model handle.
pub struct CarimeStyler {
    styler: carime_core::styler::Styler,
    config: TrainConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> CarimeStatus {
    match err {
        Error::InvalidArgument(_) => CarimeStatus::InvalidArgument,
        Error::Io { .. } => CarimeStatus::Io,
        Error::Image(_) => CarimeStatus::Io,
        Error::Shape(_) | Error::Landmark { .. } => CarimeStatus::Shape,
        Error::Dataset(_) => CarimeStatus::Dataset,
        Error::Config(_) => CarimeStatus::Config,
        Error::Checkpoint(_) => CarimeStatus::Checkpoint,
        Error::SingularTps { .. } | Error::NonFiniteLoss { .. } => CarimeStatus::Numeric,
        _ => CarimeStatus::Internal,
    }
}

fn fail(err: Error) -> CarimeStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

fn null_fail(what: &str) -> CarimeStatus {
    set_error(&format!("null pointer: {what}"));
    CarimeStatus::NullPointer
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf, CarimeStatus> {
    if ptr.is_null() {
        return Err(null_fail(what));
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(CarimeStatus::InvalidArgument)
        }
    }
}

fn load_config(path: *const c_char) -> Result<TrainConfig, CarimeStatus> {
    if path.is_null() {
        return Ok(TrainConfig::default());
    }
    let p = unsafe { path_arg(path, "config_path") }?;
    TrainConfig::load(&p).map_err(fail)
}

/// Message describing the most recent error on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn carime_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Landmarks
// ---------------------------------------------------------------------------

/// Reads a 17-point landmark file. `width`/`height` supply the image size for
/// untagged files (pass 0, 0 if the file carries a size tag).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn carime_landmarks_read(
    path: *const c_char,
    width: u32,
    height: u32,
    out: *mut *mut CarimeLandmarks,
) -> CarimeStatus {
    if out.is_null() {
        return null_fail("out");
    }
    let p = match unsafe { path_arg(path, "path") } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let fallback = if width == 0 || height == 0 { None } else { Some((width, height)) };
    match LandmarkSet::read(&p, fallback) {
        Ok(lm) => {
            unsafe { *out = Box::into_raw(Box::new(CarimeLandmarks(lm))) };
            CarimeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `handle` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn carime_landmarks_free(handle: *mut CarimeLandmarks) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

// ---------------------------------------------------------------------------
// Deformation fields
// ---------------------------------------------------------------------------

/// Builds the dense field that warps `dst`-geometry images back toward `src`
/// geometry, optionally pinning the image border.
///
/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carime_field_from_landmarks(
    src: *const CarimeLandmarks,
    dst: *const CarimeLandmarks,
    anchor_border: c_int,
    out: *mut *mut CarimeField,
) -> CarimeStatus {
    if src.is_null() || dst.is_null() {
        return null_fail("src/dst");
    }
    if out.is_null() {
        return null_fail("out");
    }
    let (src, dst) = unsafe { (&(*src).0, &(*dst).0) };
    match carime_core::field_from_landmarks(src, dst, anchor_border != 0) {
        Ok(f) => {
            unsafe { *out = Box::into_raw(Box::new(CarimeField(f))) };
            CarimeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Mean per-pixel displacement magnitude in pixels.
///
/// # Safety
/// `field` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carime_field_degree(
    field: *const CarimeField,
    out: *mut c_double,
) -> CarimeStatus {
    if field.is_null() || out.is_null() {
        return null_fail("field/out");
    }
    match carime_core::exaggeration_degree(unsafe { &(*field).0 }) {
        Ok(d) => {
            unsafe { *out = d };
            CarimeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Multiplies every displacement by `scale`.
///
/// # Safety
/// `field` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carime_field_scale(
    field: *const CarimeField,
    scale: c_double,
    out: *mut *mut CarimeField,
) -> CarimeStatus {
    if field.is_null() || out.is_null() {
        return null_fail("field/out");
    }
    match carime_core::scale_field(unsafe { &(*field).0 }, scale) {
        Ok(f) => {
            unsafe { *out = Box::into_raw(Box::new(CarimeField(f))) };
            CarimeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `handle` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn carime_field_free(handle: *mut CarimeField) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carime_image_load(
    path: *const c_char,
    out: *mut *mut CarimeImage,
) -> CarimeStatus {
    if out.is_null() {
        return null_fail("out");
    }
    let p = match unsafe { path_arg(path, "path") } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match ImageBuffer::load(&p) {
        Ok(img) => {
            unsafe { *out = Box::into_raw(Box::new(CarimeImage(img))) };
            CarimeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// Handles/paths as above.
#[no_mangle]
pub unsafe extern "C" fn carime_image_save_png(
    image: *const CarimeImage,
    path: *const c_char,
) -> CarimeStatus {
    if image.is_null() {
        return null_fail("image");
    }
    let p = match unsafe { path_arg(path, "path") } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match unsafe { &(*image).0 }.save_png(&p) {
        Ok(()) => CarimeStatus::Ok,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `image` must be valid; `width`/`height` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carime_image_size(
    image: *const CarimeImage,
    width: *mut u32,
    height: *mut u32,
) -> CarimeStatus {
    if image.is_null() || width.is_null() || height.is_null() {
        return null_fail("image/width/height");
    }
    let img = unsafe { &(*image).0 };
    unsafe {
        *width = img.width() as u32;
        *height = img.height() as u32;
    }
    CarimeStatus::Ok
}

/// # Safety
/// `handle` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn carime_image_free(handle: *mut CarimeImage) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Backward bilinear warp of an image by a deformation field of the same
/// resolution.
///
/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carime_warp_image(
    image: *const CarimeImage,
    field: *const CarimeField,
    out: *mut *mut CarimeImage,
) -> CarimeStatus {
    if image.is_null() || field.is_null() || out.is_null() {
        return null_fail("image/field/out");
    }
    match carime_core::warp_image(unsafe { &(*image).0 }, unsafe { &(*field).0 }) {
        Ok(img) => {
            unsafe { *out = Box::into_raw(Box::new(CarimeImage(img))) };
            CarimeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Loads a warper checkpoint. `config_path` may be NULL for the default
/// configuration; set `force` to skip the config-hash check.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carime_warper_load(
    checkpoint_path: *const c_char,
    config_path: *const c_char,
    force: c_int,
    out: *mut *mut CarimeWarper,
) -> CarimeStatus {
    if out.is_null() {
        return null_fail("out");
    }
    let ckpt = match unsafe { path_arg(checkpoint_path, "checkpoint_path") } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let config = match load_config(config_path) {
        Ok(c) => c,
        Err(s) => return s,
    };
    match load_warper_for_inference(&ckpt, &config, force != 0) {
        Ok(warper) => {
            unsafe { *out = Box::into_raw(Box::new(CarimeWarper { warper, config })) };
            CarimeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Length of the warp code vector the warper expects.
///
/// # Safety
/// `warper` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carime_warper_code_dim(
    warper: *const CarimeWarper,
    out: *mut usize,
) -> CarimeStatus {
    if warper.is_null() || out.is_null() {
        return null_fail("warper/out");
    }
    unsafe { *out = (*warper).config.model.warp_code_dim };
    CarimeStatus::Ok
}

/// Warps a photo by the exaggeration decoded from `warp_code`
/// (`code_len` floats), scaled by `scale`. The photo must match the model's
/// working resolution.
///
/// # Safety
/// Handles and buffers must be valid; `out_image` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carime_warper_generate(
    warper: *const CarimeWarper,
    photo: *const CarimeImage,
    warp_code: *const c_float,
    code_len: usize,
    scale: c_double,
    out_image: *mut *mut CarimeImage,
) -> CarimeStatus {
    if warper.is_null() || photo.is_null() || warp_code.is_null() || out_image.is_null() {
        return null_fail("warper/photo/warp_code/out_image");
    }
    let code = unsafe { std::slice::from_raw_parts(warp_code, code_len) };
    let h = unsafe { &*warper };
    match h.warper.sample_exaggeration(unsafe { &(*photo).0 }, code, scale) {
        Ok(sample) => {
            unsafe { *out_image = Box::into_raw(Box::new(CarimeImage(sample.warped))) };
            CarimeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `handle` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn carime_warper_free(handle: *mut CarimeWarper) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Loads a styler checkpoint; see `carime_warper_load` for the conventions.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carime_styler_load(
    checkpoint_path: *const c_char,
    config_path: *const c_char,
    force: c_int,
    out: *mut *mut CarimeStyler,
) -> CarimeStatus {
    if out.is_null() {
        return null_fail("out");
    }
    let ckpt = match unsafe { path_arg(checkpoint_path, "checkpoint_path") } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let config = match load_config(config_path) {
        Ok(c) => c,
        Err(s) => return s,
    };
    match load_styler_for_inference(&ckpt, &config, force != 0) {
        Ok(styler) => {
            unsafe { *out = Box::into_raw(Box::new(CarimeStyler { styler, config })) };
            CarimeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Renders an image in the texture described by `style_code`
/// (`code_len` floats).
///
/// # Safety
/// Handles and buffers must be valid; `out_image` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carime_styler_stylize(
    styler: *const CarimeStyler,
    image: *const CarimeImage,
    style_code: *const c_float,
    code_len: usize,
    out_image: *mut *mut CarimeImage,
) -> CarimeStatus {
    if styler.is_null() || image.is_null() || style_code.is_null() || out_image.is_null() {
        return null_fail("styler/image/style_code/out_image");
    }
    let code = unsafe { std::slice::from_raw_parts(style_code, code_len) };
    let h = unsafe { &*styler };
    let _ = &h.config;
    match h.styler.stylize(unsafe { &(*image).0 }, code) {
        Ok(img) => {
            unsafe { *out_image = Box::into_raw(Box::new(CarimeImage(img))) };
            CarimeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `handle` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn carime_styler_free(handle: *mut CarimeStyler) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}
