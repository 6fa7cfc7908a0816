//! C ABI over the geometry, masking, loss-weighting and feature-extraction
//! parts of `tpm-core`.
//!
//! Every function returns a [`TpmStatus`]. On failure the thread-local
//! message from [`tpm_last_error`] describes what went wrong. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tpm_core::geometry::{farthest_point_sample, generate_shape, normalize, Point, PointCloud};
use tpm_core::loss::{chamfer, loss_weights};
use tpm_core::masking::{derive_mask_triple, MaskSpec};
use tpm_core::model::{global_feature, init_params, ModelConfig, ModelParams};
use tpm_core::pipeline::CheckpointRecord;
use tpm_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TpmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DegenerateCloud = 3,
    DegenerateMask = 4,
    ShapeMismatch = 5,
    Numeric = 6,
    Format = 7,
    Version = 8,
    Compatibility = 9,
    Io = 10,
    BufferTooSmall = 11,
    Internal = 12,
}

/// A point cloud owned by the library.
pub struct TpmCloud {
    cloud: PointCloud,
}

/// Model configuration plus weights, loaded from a checkpoint or freshly
/// initialized.
pub struct TpmModel {
    config: ModelConfig,
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> TpmStatus {
    match e {
        Error::Parameter(_) | Error::Parse(_) | Error::State(_) => TpmStatus::InvalidArgument,
        Error::DegenerateCloud => TpmStatus::DegenerateCloud,
        Error::DegenerateMask { .. } => TpmStatus::DegenerateMask,
        Error::Shape(_) => TpmStatus::ShapeMismatch,
        Error::Numeric { .. } | Error::Diverged { .. } => TpmStatus::Numeric,
        Error::Format { .. } | Error::Json(_) | Error::Csv(_) => TpmStatus::Format,
        Error::Version { .. } => TpmStatus::Version,
        Error::Compatibility(_) => TpmStatus::Compatibility,
        Error::Io(_) => TpmStatus::Io,
    }
}

struct Fail(TpmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TpmStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(TpmStatus::InvalidArgument, msg.into())
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TpmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TpmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TpmStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn points_of(xyz: *const f32, n: usize, what: &str) -> Result<Vec<Point>, Fail> {
    let flat = slice(xyz, n.checked_mul(3).ok_or_else(|| invalid("point count overflows"))?, what)?;
    Ok(flat.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
}

fn boxed_cloud(cloud: PointCloud) -> *mut TpmCloud {
    Box::into_raw(Box::new(TpmCloud { cloud }))
}

/// Message for the most recent failure on this thread; empty after a
/// success. The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tpm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Copy `n` points from `xyz` (`3n` floats, row-major) into a new cloud.
///
/// # Safety
/// `xyz` must point to `3n` readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpm_cloud_new(xyz: *const f32, n: usize, out: *mut *mut TpmCloud) -> TpmStatus {
    guard(|| {
        let cloud = PointCloud::new(points_of(xyz, n, "xyz")?, None)?;
        write_out(out, boxed_cloud(cloud), "out")
    })
}

/// Sample a procedural shape of class `class_id` (0..8) with `n` points.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpm_generate_shape(class_id: u32, n: usize, seed: u64, out: *mut *mut TpmCloud) -> TpmStatus {
    guard(|| {
        let cloud = generate_shape(class_id as usize, n, seed)?;
        write_out(out, boxed_cloud(cloud), "out")
    })
}

/// # Safety
/// `cloud` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpm_cloud_len(cloud: *const TpmCloud, out: *mut usize) -> TpmStatus {
    guard(|| write_out(out, reference(cloud, "cloud")?.cloud.len(), "out"))
}

/// Class label, or -1 for an unlabeled cloud.
///
/// # Safety
/// `cloud` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpm_cloud_label(cloud: *const TpmCloud, out: *mut i64) -> TpmStatus {
    guard(|| {
        let label = reference(cloud, "cloud")?.cloud.label.map_or(-1, i64::from);
        write_out(out, label, "out")
    })
}

/// Copy the points into `xyz`, which holds `capacity` floats (at least
/// `3 * len`).
///
/// # Safety
/// `cloud` must be a live handle; `xyz` must hold `capacity` writable floats.
#[no_mangle]
pub unsafe extern "C" fn tpm_cloud_points(cloud: *const TpmCloud, xyz: *mut f32, capacity: usize) -> TpmStatus {
    guard(|| {
        let cloud = &reference(cloud, "cloud")?.cloud;
        let flat = cloud.flat();
        if capacity < flat.len() {
            return Err(Fail(
                TpmStatus::BufferTooSmall,
                format!("need {} floats, buffer holds {capacity}", flat.len()),
            ));
        }
        slice_mut(xyz, flat.len(), "xyz")?.copy_from_slice(&flat);
        Ok(())
    })
}

/// Centre on the centroid and scale into the unit ball, as a new cloud.
///
/// # Safety
/// `cloud` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpm_cloud_normalize(cloud: *const TpmCloud, out: *mut *mut TpmCloud) -> TpmStatus {
    guard(|| {
        let normalized = normalize(&reference(cloud, "cloud")?.cloud)?;
        write_out(out, boxed_cloud(normalized), "out")
    })
}

/// # Safety
/// `cloud` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tpm_cloud_free(cloud: *mut TpmCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Farthest point sampling: write `k` distinct indices into `out`.
///
/// # Safety
/// `cloud` must be a live handle; `out` must hold `k` writable entries.
#[no_mangle]
pub unsafe extern "C" fn tpm_fps(cloud: *const TpmCloud, k: usize, seed: u64, out: *mut usize) -> TpmStatus {
    guard(|| {
        let idx = farthest_point_sample(&reference(cloud, "cloud")?.cloud, k, seed)?;
        slice_mut(out, k, "out")?.copy_from_slice(&idx);
        Ok(())
    })
}

/// Symmetric Chamfer distance (mean squared nearest-neighbour distance in
/// both directions) between two point sets.
///
/// # Safety
/// `a` and `b` must hold `3na` and `3nb` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpm_chamfer(
    a: *const f32,
    na: usize,
    b: *const f32,
    nb: usize,
    out: *mut f64,
) -> TpmStatus {
    guard(|| {
        let d = chamfer(&points_of(a, na, "a")?, &points_of(b, nb, "b")?)?;
        write_out(out, d, "out")
    })
}

/// Per-mask loss weights `m_i / sum(m)` for `n` ratios.
///
/// # Safety
/// `ratios` and `out` must each hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn tpm_loss_weights(ratios: *const f64, n: usize, out: *mut f64) -> TpmStatus {
    guard(|| {
        let spec = MaskSpec::new(slice(ratios, n, "ratios")?.to_vec())?;
        slice_mut(out, n, "out")?.copy_from_slice(&loss_weights(&spec).lambdas);
        Ok(())
    })
}

/// The mask triple `(m0, 0.5, 1 - m0)`.
///
/// # Safety
/// `out` must hold 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tpm_derive_mask_triple(m0: f64, out: *mut f64) -> TpmStatus {
    guard(|| {
        let spec = derive_mask_triple(m0)?;
        slice_mut(out, 3, "out")?.copy_from_slice(spec.ratios());
        Ok(())
    })
}

/// Load weights and model configuration from a `.tpmc` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpm_model_load(path: *const c_char, out: *mut *mut TpmModel) -> TpmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let rec = CheckpointRecord::load(Path::new(path))?;
        let model = TpmModel {
            config: rec.header.model,
            params: rec.params,
        };
        write_out(out, Box::into_raw(Box::new(model)), "out")
    })
}

/// Randomly initialized model with the small desk configuration.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpm_model_init_desk(seed: u64, out: *mut *mut TpmModel) -> TpmStatus {
    guard(|| {
        let config = ModelConfig::desk();
        let params = init_params(&config, seed)?;
        write_out(out, Box::into_raw(Box::new(TpmModel { config, params })), "out")
    })
}

/// Length of the global feature vector produced by `model`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpm_model_feature_dim(model: *const TpmModel, out: *mut usize) -> TpmStatus {
    guard(|| write_out(out, reference(model, "model")?.config.feature_dim(), "out"))
}

/// Points per cloud expected by `model`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpm_model_points(model: *const TpmModel, out: *mut usize) -> TpmStatus {
    guard(|| write_out(out, reference(model, "model")?.config.n_points, "out"))
}

/// Pooled encoder feature of `cloud`. A negative `mask_ratio` encodes every
/// patch; otherwise that fraction is hidden with a mask drawn from `seed`.
///
/// # Safety
/// Handles must be live; `out` must hold `capacity` writable floats.
#[no_mangle]
pub unsafe extern "C" fn tpm_global_feature(
    model: *const TpmModel,
    cloud: *const TpmCloud,
    mask_ratio: f64,
    seed: u64,
    out: *mut f32,
    capacity: usize,
) -> TpmStatus {
    guard(|| {
        let model = reference(model, "model")?;
        let cloud = &reference(cloud, "cloud")?.cloud;
        let ratio = (mask_ratio >= 0.0).then_some(mask_ratio);
        let dim = model.config.feature_dim();
        if capacity < dim {
            return Err(Fail(
                TpmStatus::BufferTooSmall,
                format!("need {dim} floats, buffer holds {capacity}"),
            ));
        }
        let feature = global_feature(cloud, &model.params, &model.config, ratio, seed)?;
        slice_mut(out, dim, "out")?.copy_from_slice(&feature.0);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tpm_model_free(model: *mut TpmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

