//! C interface to the crystal triage classifier.
//!
//! Every fallible call returns a [`CrystalStatus`]; on failure the message
//! is available from [`crystal_last_error`] on the same thread until the
//! next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use crystal_core::checkpoint::load_model;
use crystal_core::labels::{ClassLabel, NUM_CLASSES};
use crystal_core::nn::Tensor;
use crystal_core::preprocess::{model_input, read_rgb, INPUT_SIDE};
use crystal_core::zoo::Model;
use crystal_core::Error;

/// Number of activations every classify call writes.
pub const CRYSTAL_NUM_CLASSES: usize = 10;
const _: () = assert!(CRYSTAL_NUM_CLASSES == NUM_CLASSES);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrystalStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Image = 5,
    ShapeMismatch = 6,
    Internal = 7,
}

/// A loaded model. Created by `crystal_model_load`, released by
/// `crystal_model_free`. Classification does not mutate the handle, so one
/// handle may be shared across threads.
pub struct CrystalModel {
    model: Model,
    architecture: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> CrystalStatus {
    match e {
        Error::Io { .. } => CrystalStatus::Io,
        Error::Checkpoint(_) | Error::UnknownArchitecture(_) => CrystalStatus::Checkpoint,
        Error::Image { .. } | Error::ImageTooSmall { .. } | Error::Upsample { .. } => CrystalStatus::Image,
        Error::ShapeMismatch { .. } => CrystalStatus::ShapeMismatch,
        _ => CrystalStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guarded(f: impl FnOnce() -> Result<(), (CrystalStatus, String)>) -> CrystalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CrystalStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CrystalStatus::Internal
        }
    }
}

fn core_err(e: Error) -> (CrystalStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CrystalStatus, String) {
    (CrystalStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (CrystalStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CrystalStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
    Ok(Path::new(s))
}

fn write_activations(model: &Model, x: Tensor<f32>, out: *mut f32) -> Result<(), (CrystalStatus, String)> {
    let y = model.forward(&x).map_err(core_err)?;
    // SAFETY: caller provides room for CRYSTAL_NUM_CLASSES floats.
    unsafe { std::ptr::copy_nonoverlapping(y.data.as_ptr(), out, NUM_CLASSES) };
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn crystal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn crystal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into a new handle stored in `*out`.
/// Caller contract: `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn crystal_model_load(path: *const c_char, out: *mut *mut CrystalModel) -> CrystalStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let model = load_model(path).map_err(core_err)?;
        let architecture = CString::new(model.spec.architecture.name()).expect("names have no NUL");
        *out = Box::into_raw(Box::new(CrystalModel { model, architecture }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
/// Caller contract: `model` must come from `crystal_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn crystal_model_free(model: *mut CrystalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Architecture name of a loaded model, valid while the handle lives.
/// Caller contract: `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn crystal_model_architecture(model: *const CrystalModel) -> *const c_char {
    model.as_ref().map_or(std::ptr::null(), |m| m.architecture.as_ptr())
}

/// Trainable parameter count of a loaded model, 0 for NULL.
/// Caller contract: `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn crystal_model_param_count(model: *const CrystalModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.param_count())
}

/// Classifies one 128x128 grayscale image given row-major in [0, 1]. Writes
/// `CRYSTAL_NUM_CLASSES` softmax activations to `out`, indexed by label id.
/// Caller contract: `pixels` must hold `width * height` floats and `out` room for
/// `CRYSTAL_NUM_CLASSES` floats.
#[no_mangle]
pub unsafe extern "C" fn crystal_model_classify_gray(
    model: *const CrystalModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    out: *mut f32,
) -> CrystalStatus {
    guarded(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if width != INPUT_SIDE || height != INPUT_SIDE {
            return Err((
                CrystalStatus::ShapeMismatch,
                format!("expected {INPUT_SIDE}x{INPUT_SIDE} pixels, got {width}x{height}"),
            ));
        }
        let data = std::slice::from_raw_parts(pixels, width * height).to_vec();
        if data.iter().any(|v| !v.is_finite()) {
            return Err((CrystalStatus::InvalidArgument, "pixels must be finite".into()));
        }
        write_activations(&model.model, Tensor::from_vec(&[1, 1, height, width], data), out)
    })
}

/// Reads an image file, brings it to model resolution, and writes
/// `CRYSTAL_NUM_CLASSES` activations to `out`.
/// Caller contract: `path` must be a NUL-terminated string and `out` have room for
/// `CRYSTAL_NUM_CLASSES` floats.
#[no_mangle]
pub unsafe extern "C" fn crystal_model_classify_file(
    model: *const CrystalModel,
    path: *const c_char,
    out: *mut f32,
) -> CrystalStatus {
    guarded(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let raw = read_rgb(path_arg(path)?).map_err(core_err)?;
        let gray = model_input(&raw).map_err(core_err)?;
        write_activations(
            &model.model,
            Tensor::from_vec(&[1, 1, INPUT_SIDE, INPUT_SIDE], gray.pixels),
            out,
        )
    })
}

/// Name of label `id`, or NULL when `id` is out of range.
#[no_mangle]
pub extern "C" fn crystal_label_name(id: usize) -> *const c_char {
    const NAMES: [&CStr; NUM_CLASSES] = [
        c"bad_drop",
        c"clear",
        c"heavy_precipitate",
        c"large_crystals",
        c"light_precipitate",
        c"medium_crystals",
        c"micro_crystals",
        c"needles_plates",
        c"phase_separation",
        c"small_crystals",
    ];
    NAMES.get(id).map_or(std::ptr::null(), |n| n.as_ptr())
}

/// 1 for crystal labels, 0 for the others, -1 when `id` is out of range.
#[no_mangle]
pub extern "C" fn crystal_label_is_crystal(id: usize) -> c_int {
    ClassLabel::from_id(id).map_or(-1, |l| l.is_crystal() as c_int)
}
