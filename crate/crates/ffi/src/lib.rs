//! C ABI over the morphable engine.
//!
//! Every entry point returns an [`M3dStatus`]; on failure the message is
//! kept per thread and read back with [`m3d_last_error`]. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use morphable::data::FeatureMap;
use morphable::infer::{estimate_pose, geodesic_error, PoseOptions};
use morphable::model::Model;
use morphable::render::Mat3;
use morphable::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum M3dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Data = 4,
    Io = 5,
    Numeric = 6,
    Panic = 7,
}

/// A trained category model.
pub struct M3dModel {
    inner: Model<f32>,
}

/// A backbone feature map, channel-major `[C, H, W]`.
pub struct M3dFeatures {
    inner: FeatureMap,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> M3dStatus {
    match e {
        Error::Shape(_) => M3dStatus::Shape,
        Error::Invalid(_) | Error::Config(_) | Error::Contract(_) => M3dStatus::InvalidArgument,
        Error::Data { .. } | Error::Validation(_) => M3dStatus::Data,
        Error::Io { .. } => M3dStatus::Io,
        Error::Numeric(_) | Error::Render(_) => M3dStatus::Numeric,
    }
}

struct Fail(M3dStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(M3dStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> M3dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => M3dStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            M3dStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(M3dStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn box_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread, or null.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn m3d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn m3d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a model file written by `morphable train`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_load(path: *const c_char, out: *mut *mut M3dModel) -> M3dStatus {
    guard(|| {
        let p = path_arg(path)?;
        box_out(out, M3dModel { inner: Model::load(&p)? })
    })
}

/// # Safety
/// `model` must come from [`m3d_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_free(model: *mut M3dModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learned scalars.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_param_count(model: *const M3dModel, out: *mut usize) -> M3dStatus {
    guard(|| {
        let m = deref(model, "model")?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.inner.param_count();
        Ok(())
    })
}

/// Channel count the model expects from feature maps.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_input_channels(model: *const M3dModel, out: *mut usize) -> M3dStatus {
    guard(|| {
        let m = deref(model, "model")?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.inner.raw_channels;
        Ok(())
    })
}

/// Write the template mesh as Wavefront OBJ.
///
/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_export_obj(model: *const M3dModel, path: *const c_char) -> M3dStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let p = path_arg(path)?;
        let mesh = m.inner.template()?;
        if mesh.is_empty() {
            return Err(Fail(M3dStatus::Numeric, "the template is empty".into()));
        }
        mesh.export_obj(&p)?;
        Ok(())
    })
}

/// Copy `channels * height * width` floats, channel-major, into a new map.
///
/// # Safety
/// `data` must point to `len` readable floats and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn m3d_features_new(
    channels: usize,
    height: usize,
    width: usize,
    data: *const f32,
    len: usize,
    out: *mut *mut M3dFeatures,
) -> M3dStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let inner = FeatureMap::new(channels, height, width, values)?;
        box_out(out, M3dFeatures { inner })
    })
}

/// Read a `.feat` file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn m3d_features_load(path: *const c_char, out: *mut *mut M3dFeatures) -> M3dStatus {
    guard(|| {
        let p = path_arg(path)?;
        let bytes = std::fs::read(&p).map_err(|e| Fail(M3dStatus::Io, format!("{}: {e}", p.display())))?;
        let inner = FeatureMap::from_bytes(&bytes).map_err(|m| Fail(M3dStatus::Data, format!("{}: {m}", p.display())))?;
        box_out(out, M3dFeatures { inner })
    })
}

/// Write a `.feat` file.
///
/// # Safety
/// `features` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn m3d_features_save(features: *const M3dFeatures, path: *const c_char) -> M3dStatus {
    guard(|| {
        let f = deref(features, "features")?;
        let p = path_arg(path)?;
        std::fs::write(&p, f.inner.to_bytes()).map_err(|e| Fail(M3dStatus::Io, format!("{}: {e}", p.display())))
    })
}

/// # Safety
/// `features` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn m3d_features_free(features: *mut M3dFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Estimate the object rotation with the model's camera and pose settings.
///
/// Writes a row-major 3x3 matrix to `rotation` and the objective to `score`
/// (either may be null).
///
/// # Safety
/// Handles must be live; `rotation` must have room for 9 doubles.
#[no_mangle]
pub unsafe extern "C" fn m3d_estimate_pose(
    model: *const M3dModel,
    features: *const M3dFeatures,
    rotation: *mut f64,
    score: *mut f64,
) -> M3dStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let f = deref(features, "features")?;
        let opts = PoseOptions::from_config(&m.inner.config);
        let hyp = estimate_pose(&m.inner, &f.inner, None, &opts)?;
        if !rotation.is_null() {
            let out = std::slice::from_raw_parts_mut(rotation, 9);
            out.copy_from_slice(&hyp.rotation.concat());
        }
        if let Some(s) = score.as_mut() {
            *s = hyp.score;
        }
        Ok(())
    })
}

/// Angle in degrees between two row-major rotation matrices.
///
/// # Safety
/// `a` and `b` must each point to 9 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn m3d_geodesic_error_deg(a: *const f64, b: *const f64, out: *mut f64) -> M3dStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("rotation"));
        }
        let read = |p: *const f64| -> Mat3 {
            let s = std::slice::from_raw_parts(p, 9);
            [[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], s[8]]]
        };
        *out.as_mut().ok_or_else(|| null("out"))? = geodesic_error(&read(a), &read(b));
        Ok(())
    })
}
