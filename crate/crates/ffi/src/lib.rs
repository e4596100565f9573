//! C ABI for the Gaussian-splatting SLAM engine.
//!
//! All entry points are `extern "C"`, never unwind, and report failures
//! through [`MgsStatus`] codes; the most recent failure message is available
//! per thread via [`mgs_last_error`]. Handles are opaque pointers owned by
//! the library; every `*_new`/`*_load` has a matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_float, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use mgs_core::config::RunConfig;
use mgs_core::dataset::load_trajectory;
use mgs_core::error::Error;
use mgs_core::eval::{ate_rmse, AlignMode};
use mgs_core::gaussian_map::GaussianMap;
use mgs_core::geom::{Intrinsics, Pose};
use mgs_core::pipeline::run_pipeline;
use mgs_core::rasterizer::{render, RasterSettings};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MgsStatus {
    MgsOk = 0,
    MgsInvalidArgument = 1,
    MgsIoError = 2,
    MgsParseError = 3,
    MgsRuntimeError = 4,
    MgsPanic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_for(err: &Error) -> MgsStatus {
    match err {
        Error::DimensionMismatch(_)
        | Error::InvalidArgument(_)
        | Error::BehindCamera { .. }
        | Error::WindowTooSmall { .. }
        | Error::TooFewAssociations { .. }
        | Error::UnknownPreset { .. } => MgsStatus::MgsInvalidArgument,
        Error::MissingFile(_) | Error::Io { .. } => MgsStatus::MgsIoError,
        Error::ParseLine { .. } | Error::Config(_) | Error::Checkpoint(_) => {
            MgsStatus::MgsParseError
        }
        _ => MgsStatus::MgsRuntimeError,
    }
}

fn guard(f: impl FnOnce() -> MgsStatus) -> MgsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&msg);
            MgsStatus::MgsPanic
        }
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or null.
unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, MgsStatus> {
    if ptr.is_null() {
        set_last_error("null string argument");
        return Err(MgsStatus::MgsInvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error("string argument is not valid UTF-8");
        MgsStatus::MgsInvalidArgument
    })
}

/// Opaque run configuration handle.
pub struct MgsConfig {
    inner: RunConfig,
}

/// Opaque Gaussian map handle.
pub struct MgsMap {
    inner: GaussianMap,
}

/// Summary of a completed run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MgsRunSummary {
    pub frames_tracked: u64,
    pub keyframes: u64,
    pub gaussians: u64,
    pub ate_full_cm: c_double,
    pub ate_keyframes_cm: c_double,
    pub mean_psnr_db: c_double,
    pub mean_ssim: c_double,
    /// Negative when depth ground truth was unavailable.
    pub mean_depth_l1_cm: c_double,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mgs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent error on this thread (empty when none).
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mgs_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// New configuration with default values. Free with [`mgs_config_free`].
#[no_mangle]
pub extern "C" fn mgs_config_new() -> *mut MgsConfig {
    Box::into_raw(Box::new(MgsConfig {
        inner: RunConfig::default(),
    }))
}

/// Load a key=value configuration file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mgs_config_load(
    path: *const c_char,
    out: *mut *mut MgsConfig,
) -> MgsStatus {
    guard(|| {
        if out.is_null() {
            set_last_error("null output pointer");
            return MgsStatus::MgsInvalidArgument;
        }
        let path = match cstr(path) {
            Ok(s) => PathBuf::from(s),
            Err(status) => return status,
        };
        match RunConfig::load(&path) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(MgsConfig { inner: cfg }));
                MgsStatus::MgsOk
            }
            Err(e) => {
                set_last_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Apply one `key=value` assignment to a configuration.
///
/// # Safety
/// `config` must come from this library; `key` and `value` must be valid
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mgs_config_set(
    config: *mut MgsConfig,
    key: *const c_char,
    value: *const c_char,
) -> MgsStatus {
    guard(|| {
        let Some(config) = config.as_mut() else {
            set_last_error("null config handle");
            return MgsStatus::MgsInvalidArgument;
        };
        let (key, value) = match (cstr(key), cstr(value)) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match config.inner.set(key, value) {
            Ok(()) => MgsStatus::MgsOk,
            Err(e) => {
                set_last_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// # Safety
/// `config` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mgs_config_free(config: *mut MgsConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Run the full pipeline described by the configuration. Artifacts land in
/// the configuration's output directory; `summary` (optional) receives the
/// headline numbers.
///
/// # Safety
/// `config` must come from this library; `summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn mgs_run(
    config: *const MgsConfig,
    summary: *mut MgsRunSummary,
) -> MgsStatus {
    guard(|| {
        let Some(config) = config.as_ref() else {
            set_last_error("null config handle");
            return MgsStatus::MgsInvalidArgument;
        };
        match run_pipeline(&config.inner) {
            Ok(s) => {
                if let Some(out) = summary.as_mut() {
                    *out = MgsRunSummary {
                        frames_tracked: s.frames_tracked as u64,
                        keyframes: s.keyframes as u64,
                        gaussians: s.gaussians as u64,
                        ate_full_cm: s.ate_full_cm,
                        ate_keyframes_cm: s.ate_keyframes_cm,
                        mean_psnr_db: s.mean_psnr_db,
                        mean_ssim: s.mean_ssim,
                        mean_depth_l1_cm: s.mean_depth_l1_cm.unwrap_or(-1.0),
                    };
                }
                MgsStatus::MgsOk
            }
            Err(e) => {
                set_last_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Load a map checkpoint (MGSM format).
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mgs_map_load(path: *const c_char, out: *mut *mut MgsMap) -> MgsStatus {
    guard(|| {
        if out.is_null() {
            set_last_error("null output pointer");
            return MgsStatus::MgsInvalidArgument;
        }
        let path = match cstr(path) {
            Ok(s) => PathBuf::from(s),
            Err(status) => return status,
        };
        match GaussianMap::load_checkpoint(&path) {
            Ok(map) => {
                *out = Box::into_raw(Box::new(MgsMap { inner: map }));
                MgsStatus::MgsOk
            }
            Err(e) => {
                set_last_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Save a map checkpoint (MGSM format).
///
/// # Safety
/// `map` must come from this library; `path` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn mgs_map_save(map: *const MgsMap, path: *const c_char) -> MgsStatus {
    guard(|| {
        let Some(map) = map.as_ref() else {
            set_last_error("null map handle");
            return MgsStatus::MgsInvalidArgument;
        };
        let path = match cstr(path) {
            Ok(s) => PathBuf::from(s),
            Err(status) => return status,
        };
        match map.inner.save_checkpoint(&path) {
            Ok(()) => MgsStatus::MgsOk,
            Err(e) => {
                set_last_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Number of Gaussians in the map.
///
/// # Safety
/// `map` must come from this library or be null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn mgs_map_len(map: *const MgsMap) -> u64 {
    map.as_ref().map(|m| m.inner.len() as u64).unwrap_or(0)
}

/// # Safety
/// `map` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mgs_map_free(map: *mut MgsMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Render the map from a camera-to-world pose
/// `[tx, ty, tz, qx, qy, qz, qw]` with the given pinhole intrinsics.
/// `out_color` receives `width*height*3` floats in [0,1] (row-major RGB),
/// `out_depth` (optional) `width*height` floats in meters.
///
/// # Safety
/// `map` must come from this library; `pose_twc` must point at 7 doubles;
/// the output buffers must hold the advertised number of floats.
#[no_mangle]
pub unsafe extern "C" fn mgs_map_render(
    map: *const MgsMap,
    pose_twc: *const c_double,
    fx: c_double,
    fy: c_double,
    cx: c_double,
    cy: c_double,
    width: c_int,
    height: c_int,
    out_color: *mut c_float,
    out_depth: *mut c_float,
) -> MgsStatus {
    guard(|| {
        let Some(map) = map.as_ref() else {
            set_last_error("null map handle");
            return MgsStatus::MgsInvalidArgument;
        };
        if pose_twc.is_null() || out_color.is_null() {
            set_last_error("null pose or color buffer");
            return MgsStatus::MgsInvalidArgument;
        }
        if width <= 0 || height <= 0 {
            set_last_error("image dimensions must be positive");
            return MgsStatus::MgsInvalidArgument;
        }
        let (w, h) = (width as usize, height as usize);
        let k = match Intrinsics::new(fx, fy, cx, cy, w, h) {
            Ok(k) => k,
            Err(e) => {
                set_last_error(&e.to_string());
                return MgsStatus::MgsInvalidArgument;
            }
        };
        let p = std::slice::from_raw_parts(pose_twc, 7);
        let rot = nalgebra::UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
            p[6], p[3], p[4], p[5],
        ));
        let pose_wc = Pose::new(rot, nalgebra::Vector3::new(p[0], p[1], p[2]));
        let settings = RasterSettings {
            threads: 2,
            ..Default::default()
        };
        let out = render(
            &map.inner,
            &pose_wc.inverse(),
            &k,
            nalgebra::Vector3::zeros(),
            &settings,
        );
        let color = std::slice::from_raw_parts_mut(out_color, w * h * 3);
        for (dst, src) in color.iter_mut().zip(out.color.as_slice()) {
            *dst = *src as c_float;
        }
        if !out_depth.is_null() {
            let depth = std::slice::from_raw_parts_mut(out_depth, w * h);
            for (dst, src) in depth.iter_mut().zip(&out.depth) {
                *dst = *src as c_float;
            }
        }
        MgsStatus::MgsOk
    })
}

/// Trajectory alignment modes for [`mgs_ate_rmse`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MgsAlign {
    MgsAlignNone = 0,
    MgsAlignSe3 = 1,
    MgsAlignSim3 = 2,
}

/// Absolute trajectory error (RMSE, centimeters) between two TUM-format
/// trajectory files.
///
/// # Safety
/// `estimated` and `reference` must be valid NUL-terminated paths; `out_cm`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn mgs_ate_rmse(
    estimated: *const c_char,
    reference: *const c_char,
    align: MgsAlign,
    out_cm: *mut c_double,
) -> MgsStatus {
    guard(|| {
        if out_cm.is_null() {
            set_last_error("null output pointer");
            return MgsStatus::MgsInvalidArgument;
        }
        let (est_path, ref_path) = match (cstr(estimated), cstr(reference)) {
            (Ok(a), Ok(b)) => (Path::new(a).to_path_buf(), Path::new(b).to_path_buf()),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let run = || -> Result<f64, Error> {
            let est = load_trajectory(&est_path)?;
            let reference = load_trajectory(&ref_path)?;
            let mode = match align {
                MgsAlign::MgsAlignNone => AlignMode::None,
                MgsAlign::MgsAlignSe3 => AlignMode::Se3,
                MgsAlign::MgsAlignSim3 => AlignMode::Sim3,
            };
            ate_rmse(&est, &reference, mode)
        };
        match run() {
            Ok(v) => {
                *out_cm = v;
                MgsStatus::MgsOk
            }
            Err(e) => {
                set_last_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}
