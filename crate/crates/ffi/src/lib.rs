//! C ABI over the localization pipeline.
//!
//! Every fallible call returns a [`CsilocStatus`]; on anything but
//! `CSILOC_STATUS_OK` the message is available from
//! [`csiloc_last_error_message`] on the same thread. Handles are opaque and
//! freed by their `_free` function; freeing NULL is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use csiloc::config::PipelineConfig;
use csiloc::csi::{sanitize_phase, CsiObservation};
use csiloc::nn::Model;
use csiloc::pipeline::{localize, sanitize_all, Localization};
use csiloc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsilocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    LengthMismatch = 3,
    NonFinite = 4,
    Config = 5,
    Io = 6,
    Parse = 7,
    ShapeMismatch = 8,
    /// Training diverged or an activation went non-finite.
    Numeric = 9,
    /// No usable belief, candidate or surviving trajectory.
    NoTrajectory = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

impl From<&Error> for CsilocStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::UnusableLocation { .. } | Error::OffGrid { .. } => Self::InvalidInput,
            Error::InsufficientObservations { .. } | Error::WindowTooLarge { .. } | Error::NoRecentObservations { .. } => {
                Self::InvalidInput
            }
            Error::LengthMismatch { .. } => Self::LengthMismatch,
            Error::NonFinite { .. } => Self::NonFinite,
            Error::Config { .. } => Self::Config,
            Error::Io { .. } => Self::Io,
            Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => Self::Parse,
            Error::ShapeMismatch(_) => Self::ShapeMismatch,
            Error::Divergence { .. } | Error::NonFiniteActivation(_) => Self::Numeric,
            Error::AllNullBelief { .. } | Error::EmptyCandidates { .. } | Error::AllRejected => Self::NoTrajectory,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: CsilocStatus, message: impl Into<String>) -> CsilocStatus {
    set_error(message.into());
    status
}

/// Runs `f`, turning errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), CsilocStatus>) -> CsilocStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsilocStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(CsilocStatus::Panic, msg)
        }
    }
}

fn check(r: csiloc::Result<()>) -> Result<(), CsilocStatus> {
    r.map_err(|e| fail(CsilocStatus::from(&e), e.to_string()))
}

fn lift<T>(r: csiloc::Result<T>) -> Result<T, CsilocStatus> {
    r.map_err(|e| fail(CsilocStatus::from(&e), e.to_string()))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), CsilocStatus> {
    if p.is_null() {
        Err(fail(CsilocStatus::NullPointer, format!("{name} is NULL")))
    } else {
        Ok(())
    }
}

unsafe fn utf8<'a>(s: *const c_char, name: &str) -> Result<&'a str, CsilocStatus> {
    non_null(s, name)?;
    CStr::from_ptr(s).to_str().map_err(|_| fail(CsilocStatus::InvalidInput, format!("{name} is not UTF-8")))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on this thread.
#[no_mangle]
pub extern "C" fn csiloc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn csiloc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Removes the affine component from `n` raw phases at subcarrier indices
/// `k`, writing `n` values to `out`.
///
/// # Safety
/// `raw`, `k` and `out` must each point to `n` valid elements.
#[no_mangle]
pub unsafe extern "C" fn csiloc_sanitize_phase(raw: *const f64, k: *const i32, n: usize, out: *mut f64) -> CsilocStatus {
    guard(|| {
        non_null(raw, "raw")?;
        non_null(k, "k")?;
        non_null(out, "out")?;
        let clean = lift(sanitize_phase(std::slice::from_raw_parts(raw, n), std::slice::from_raw_parts(k, n)))?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&clean);
        Ok(())
    })
}

/// Pipeline configuration.
pub struct CsilocConfig(PipelineConfig);

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn csiloc_config_default(out: *mut *mut CsilocConfig) -> CsilocStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(CsilocConfig(PipelineConfig::default())));
        Ok(())
    })
}

/// Parses and validates a TOML configuration document.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csiloc_config_from_toml(toml: *const c_char, out: *mut *mut CsilocConfig) -> CsilocStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = lift(PipelineConfig::from_toml(utf8(toml, "toml")?))?;
        check(cfg.validate())?;
        *out = Box::into_raw(Box::new(CsilocConfig(cfg)));
        Ok(())
    })
}

/// Reads a TOML configuration file, applying the `CSILOC_SEED` override.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csiloc_config_load(path: *const c_char, out: *mut *mut CsilocConfig) -> CsilocStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = lift(PipelineConfig::load(Some(Path::new(utf8(path, "path")?))))?;
        *out = Box::into_raw(Box::new(CsilocConfig(cfg)));
        Ok(())
    })
}

/// Number of phase values per observation the configuration expects.
///
/// # Safety
/// `cfg` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csiloc_config_channels(cfg: *const CsilocConfig) -> usize {
    cfg.as_ref().map_or(0, |c| c.0.field.layout.channels())
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csiloc_config_free(cfg: *mut CsilocConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// A trained classifier.
pub struct CsilocModel(Model);

/// Loads a model file written by `csiloc train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csiloc_model_load(path: *const c_char, out: *mut *mut CsilocModel) -> CsilocStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = utf8(path, "path")?;
        let text = std::fs::read_to_string(path).map_err(|e| fail(CsilocStatus::Io, format!("{path}: {e}")))?;
        *out = Box::into_raw(Box::new(CsilocModel(lift(Model::from_json(&text))?)));
        Ok(())
    })
}

/// Location classes plus the null class.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csiloc_model_n_classes(model: *const CsilocModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().n_classes)
}

/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csiloc_model_sequence_length(model: *const CsilocModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().sequence_length)
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csiloc_model_free(model: *mut CsilocModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// One point of the selected trajectory.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsilocEstimate {
    pub tau_ms: i64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub stride: f64,
    /// Grid cell the estimate snaps to.
    pub col: usize,
    pub row: usize,
}

/// Beliefs and selected trajectory of one localized walk.
pub struct CsilocLocalization(Localization);

/// Localizes a walk of `n_obs` observations with `n_channels` phases each,
/// stored row-major in `phases`. With `raw` nonzero the phases are
/// sanitized first.
///
/// # Safety
/// `t_ms` must hold `n_obs` values, `phases` `n_obs * n_channels`; the
/// handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn csiloc_localize(
    model: *const CsilocModel,
    cfg: *const CsilocConfig,
    t_ms: *const i64,
    phases: *const f64,
    n_obs: usize,
    n_channels: usize,
    raw: i32,
    out: *mut *mut CsilocLocalization,
) -> CsilocStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(cfg, "cfg")?;
        non_null(t_ms, "t_ms")?;
        non_null(phases, "phases")?;
        non_null(out, "out")?;
        let (model, cfg) = (&(*model).0, &(*cfg).0);
        let expected = cfg.field.layout.channels();
        if n_channels != expected {
            return Err(fail(CsilocStatus::LengthMismatch, format!("expected {expected} channels, got {n_channels}")));
        }
        let times = std::slice::from_raw_parts(t_ms, n_obs);
        let values = std::slice::from_raw_parts(phases, n_obs * n_channels);
        let obs: Vec<CsiObservation> = times
            .iter()
            .zip(values.chunks_exact(n_channels))
            .map(|(&t, p)| CsiObservation::new(t, None, p.to_vec()))
            .collect();
        let obs = if raw != 0 { lift(sanitize_all(&obs, &cfg.field.layout, &cfg.sanitize))? } else { obs };
        let loc = lift(localize(model, &obs, &cfg.field.grid, &cfg.stages()))?;
        *out = Box::into_raw(Box::new(CsilocLocalization(loc)));
        Ok(())
    })
}

/// Belief timesteps of the final pass.
///
/// # Safety
/// `loc` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csiloc_localization_belief_count(loc: *const CsilocLocalization) -> usize {
    loc.as_ref().map_or(0, |l| l.0.last().beliefs.len())
}

/// Copies the final pass's beliefs, row-major with one row of class
/// probabilities per timestep, and their times. `times_ms` may be NULL.
///
/// # Safety
/// `probs` must hold `cap` values and `times_ms`, if not NULL, one value per
/// belief.
#[no_mangle]
pub unsafe extern "C" fn csiloc_localization_beliefs(
    loc: *const CsilocLocalization,
    probs: *mut f64,
    cap: usize,
    times_ms: *mut i64,
) -> CsilocStatus {
    guard(|| {
        non_null(loc, "loc")?;
        non_null(probs, "probs")?;
        let pass = (*loc).0.last();
        let flat: Vec<f64> = pass.beliefs.iter().flat_map(|b| b.probs.iter().copied()).collect();
        if cap < flat.len() {
            return Err(fail(CsilocStatus::BufferTooSmall, format!("need {} values, have {cap}", flat.len())));
        }
        std::slice::from_raw_parts_mut(probs, flat.len()).copy_from_slice(&flat);
        if !times_ms.is_null() {
            std::slice::from_raw_parts_mut(times_ms, pass.belief_times.len()).copy_from_slice(&pass.belief_times);
        }
        Ok(())
    })
}

/// Points in the selected trajectory; 0 when every hypothesis was rejected.
///
/// # Safety
/// `loc` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csiloc_localization_trajectory_len(loc: *const CsilocLocalization) -> usize {
    loc.as_ref().and_then(|l| l.0.last().selected.as_ref()).map_or(0, |s| s.estimates.len())
}

/// Copies the selected trajectory. Fails with `CSILOC_STATUS_NO_TRAJECTORY`
/// when nothing survived tracking.
///
/// # Safety
/// `out` must hold `cap` estimates.
#[no_mangle]
pub unsafe extern "C" fn csiloc_localization_trajectory(
    loc: *const CsilocLocalization,
    out: *mut CsilocEstimate,
    cap: usize,
) -> CsilocStatus {
    guard(|| {
        non_null(loc, "loc")?;
        non_null(out, "out")?;
        let pass = (*loc).0.last();
        let Some(sel) = &pass.selected else {
            let why = pass.failure.clone().unwrap_or_else(|| "no trajectory selected".into());
            return Err(fail(CsilocStatus::NoTrajectory, why));
        };
        if cap < sel.estimates.len() {
            return Err(fail(CsilocStatus::BufferTooSmall, format!("need {} estimates, have {cap}", sel.estimates.len())));
        }
        let dst = std::slice::from_raw_parts_mut(out, sel.estimates.len());
        for ((d, e), &(col, row)) in dst.iter_mut().zip(&sel.estimates).zip(&sel.snapped_cells) {
            *d = CsilocEstimate { tau_ms: e.tau_ms, x: e.x, y: e.y, theta: e.theta, stride: e.stride, col, row };
        }
        Ok(())
    })
}

/// # Safety
/// `loc` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csiloc_localization_free(loc: *mut CsilocLocalization) {
    if !loc.is_null() {
        drop(Box::from_raw(loc));
    }
}
