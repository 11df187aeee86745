//! C ABI over the depict core: checkpoint handles, segmentation, coding rates and the
//! verification suite.
//!
//! Every function returns a [`DepictStatus`]. On failure a message is kept per thread and can
//! be read with [`depict_last_error`]. Panics are caught at the boundary and reported as
//! [`DepictStatus::Panic`]. Matrices are column-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use depict::coding_rate::{coding_rate, projected_coding_rate, RateConfig};
use depict::decoder::{forward, load_checkpoint, predict_labels, DecoderConfig, DecoderParams, Variant};
use depict::operators::StepForm;
use depict::verify::run_all;
use depict::{Error, Matrix};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepictStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Numerical = 6,
    ChecksFailed = 7,
    Panic = 8,
}

/// Loaded checkpoint.
pub struct DepictModel {
    config: DecoderConfig,
    params: DecoderParams,
}

/// Shape summary of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DepictModelInfo {
    /// 0 for the self-attention variant, 1 for the cross-attention variant.
    pub variant: u32,
    pub dim: u32,
    pub num_classes: u32,
    pub sa_layers: u32,
    pub ca_layers: u32,
    pub heads: u32,
    pub head_dim: u32,
    /// 0 for the full step, 1 for the simplified step.
    pub step_form: u32,
    pub epsilon: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> DepictStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::CountMismatch { .. } => DepictStatus::ShapeMismatch,
        Error::Io(_) => DepictStatus::Io,
        Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::ShapeCorrupt { .. } | Error::Json(_) | Error::Csv(_) => {
            DepictStatus::Format
        }
        Error::NotSymmetric { .. }
        | Error::NotPositiveDefinite
        | Error::NoConvergence { .. }
        | Error::RankDeficient { .. }
        | Error::NonFinite(_)
        | Error::Divergence { .. } => DepictStatus::Numerical,
        _ => DepictStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and panics.
fn guard(f: impl FnOnce() -> Result<(), (DepictStatus, String)>) -> DepictStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DepictStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            DepictStatus::Panic
        }
    }
}

fn core<T>(r: depict::Result<T>) -> Result<T, (DepictStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (DepictStatus, String) {
    (DepictStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (DepictStatus, String) {
    (DepictStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `data` must point to `rows * cols` readable doubles.
unsafe fn read_matrix(data: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, (DepictStatus, String)> {
    if data.is_null() {
        return Err(null(what));
    }
    if rows == 0 || cols == 0 {
        return Err((DepictStatus::ShapeMismatch, format!("{what} has an empty dimension")));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| invalid(format!("{what} dimensions overflow")))?;
    let slice = std::slice::from_raw_parts(data, len);
    core(Matrix::from_col_major(rows, cols, slice.to_vec()))
}

fn rate_config(epsilon: f64) -> Result<RateConfig, (DepictStatus, String)> {
    core(RateConfig::new(epsilon))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn depict_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn depict_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable. On success `*out` owns a
/// handle to release with [`depict_model_free`].
#[no_mangle]
pub unsafe extern "C" fn depict_model_load(path: *const c_char, out: *mut *mut DepictModel) -> DepictStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let (config, params) = core(load_checkpoint(&PathBuf::from(p)))?;
        *out = Box::into_raw(Box::new(DepictModel { config, params }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`depict_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn depict_model_free(model: *mut DepictModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` writable.
#[no_mangle]
pub unsafe extern "C" fn depict_model_info(model: *const DepictModel, info: *mut DepictModelInfo) -> DepictStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if info.is_null() {
            return Err(null("info"));
        }
        let c = &m.config;
        *info = DepictModelInfo {
            variant: match c.variant {
                Variant::Sa => 0,
                Variant::Ca => 1,
            },
            dim: c.dim as u32,
            num_classes: c.num_classes as u32,
            sa_layers: c.sa_layers as u32,
            ca_layers: c.ca_layers as u32,
            heads: c.heads as u32,
            head_dim: c.head_dim as u32,
            step_form: match c.step_form {
                StepForm::Full => 0,
                StepForm::Simplified => 1,
            },
            epsilon: c.epsilon,
        };
        Ok(())
    })
}

/// Segments `n` patch embeddings (`dim x n`, column-major).
///
/// # Safety
/// `embeddings` must hold `dim * n` doubles and `labels` room for `n` values; `logits`, when not
/// null, must have room for `num_classes * n` doubles and receives the column-major mask logits.
#[no_mangle]
pub unsafe extern "C" fn depict_model_segment(
    model: *const DepictModel,
    embeddings: *const f64,
    dim: usize,
    n: usize,
    labels: *mut u32,
    logits: *mut f64,
) -> DepictStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        if dim != m.config.dim {
            return Err((
                DepictStatus::ShapeMismatch,
                format!("model expects dimension {}, got {dim}", m.config.dim),
            ));
        }
        let z = read_matrix(embeddings, dim, n, "embeddings")?;
        let out = core(forward(&z, &m.params, &m.config))?;
        for (k, l) in predict_labels(&out.masks).into_iter().enumerate() {
            *labels.add(k) = l as u32;
        }
        if !logits.is_null() {
            ptr::copy_nonoverlapping(out.masks.data().as_ptr(), logits, out.masks.data().len());
        }
        Ok(())
    })
}

/// `½ log det(I + dim/(n ε²) Z Zᵀ)`.
///
/// # Safety
/// `z` must hold `dim * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn depict_coding_rate(z: *const f64, dim: usize, n: usize, epsilon: f64, out: *mut f64) -> DepictStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let zm = read_matrix(z, dim, n, "z")?;
        *out = core(coding_rate(&zm, &rate_config(epsilon)?))?;
        Ok(())
    })
}

/// Rate of `Pᵀ Z` with scale `m/(n ε²)` for a `dim x m` basis `P`. `orthonormal` (nullable)
/// receives 1 when `P` has orthonormal columns.
///
/// # Safety
/// `z` must hold `dim * n` doubles, `basis` `dim * m` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn depict_projected_rate(
    z: *const f64,
    dim: usize,
    n: usize,
    basis: *const f64,
    m: usize,
    epsilon: f64,
    out: *mut f64,
    orthonormal: *mut i32,
) -> DepictStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let zm = read_matrix(z, dim, n, "z")?;
        let pm = read_matrix(basis, dim, m, "basis")?;
        let r = core(projected_coding_rate(&zm, &pm, &rate_config(epsilon)?))?;
        *out = r.value;
        if !orthonormal.is_null() {
            *orthonormal = i32::from(r.orthonormal_basis);
        }
        Ok(())
    })
}

/// Runs every verification check with default trial counts. `json` (nullable) receives the
/// full report, to release with [`depict_string_free`]. Returns
/// [`DepictStatus::ChecksFailed`] when a hard check fails; the report is still produced.
///
/// # Safety
/// `json`, when not null, must be writable.
#[no_mangle]
pub unsafe extern "C" fn depict_verify_run_all(seed: u64, json: *mut *mut c_char) -> DepictStatus {
    let mut failed = false;
    let status = guard(|| {
        if !json.is_null() {
            *json = ptr::null_mut();
        }
        let outcome = core(run_all(seed))?;
        if !json.is_null() {
            let text = core(outcome.to_json())?;
            *json = CString::new(text).map_err(|_| invalid("report contains NUL"))?.into_raw();
        }
        failed = !outcome.pass;
        Ok(())
    });
    if status == DepictStatus::Ok && failed {
        set_error("one or more hard checks failed");
        return DepictStatus::ChecksFailed;
    }
    status
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn depict_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
