//! C ABI over the `cstg` engine.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a
//! [`CstgStatus`]; on failure the message is available from
//! [`cstg_last_error`] until the next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cstg::data::Dataset;
use cstg::experiment::{run_on, DatasetSpec, ExperimentConfig};
use cstg::tensor::Tensor;
use cstg::training::Model;
use cstg::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CstgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Dimension = 5,
    Diverged = 6,
    Io = 7,
    Internal = 8,
}

/// Opaque dataset handle.
pub struct CstgDataset {
    inner: Dataset,
}

/// Opaque trained-model handle.
pub struct CstgModel {
    inner: Model,
    metric: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> CstgStatus {
    match e {
        Error::Config(_) => CstgStatus::Config,
        Error::Dimension { .. } => CstgStatus::Dimension,
        Error::Data(_) | Error::UndefinedMetric(_) => CstgStatus::Data,
        Error::Diverged { .. } | Error::GridDiverged { .. } => CstgStatus::Diverged,
        Error::Io { .. } | Error::Format { .. } | Error::Csv(_) | Error::Json(_) => CstgStatus::Io,
        Error::Fold { source, .. } => status_of(source),
        Error::Contract(_) => CstgStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (CstgStatus, String)>) -> CstgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CstgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CstgStatus::Internal
        }
    }
}

fn lift(e: Error) -> (CstgStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CstgStatus, String) {
    (CstgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CstgStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CstgStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn read_matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Tensor, (CstgStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| (CstgStatus::InvalidArgument, format!("{what}: size overflow")))?;
    let data = std::slice::from_raw_parts(p, n).to_vec();
    Tensor::matrix(rows, cols, data).map_err(lift)
}

/// Message of the last failing call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cstg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Generate a synthetic benchmark (`"xor1"`, `"xor2"`, `"xor3"` or `"xor4"`).
///
/// # Safety
/// `kind` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cstg_dataset_generate(
    kind: *const c_char,
    n: usize,
    seed: u64,
    out: *mut *mut CstgDataset,
) -> CstgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let kind = read_str(kind, "kind")?;
        let spec = match kind {
            "xor1" => DatasetSpec::Xor1 { n, seed },
            "xor2" => DatasetSpec::Xor2 { n, seed },
            "xor3" => DatasetSpec::Xor3 { n, seed },
            "xor4" => DatasetSpec::Xor4 { n, seed },
            other => return Err((CstgStatus::InvalidArgument, format!("unknown dataset '{other}'"))),
        };
        let ds = spec.load().map_err(lift)?;
        *out = Box::into_raw(Box::new(CstgDataset { inner: ds }));
        Ok(())
    })
}

/// Sample count, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn cstg_dataset_rows(ds: *const CstgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Explanatory feature count, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn cstg_dataset_features(ds: *const CstgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n_features())
}

/// Context width, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn cstg_dataset_context_dim(ds: *const CstgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.context_dim())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cstg_dataset_free(ds: *mut CstgDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Train from a JSON experiment config. When `ds` is non-null it replaces the
/// config's dataset. The returned model is the first fold's (or the holdout)
/// model.
///
/// # Safety
/// `config_json` must be a NUL-terminated string, `ds` null or live, and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cstg_train(
    config_json: *const c_char,
    ds: *const CstgDataset,
    out: *mut *mut CstgModel,
) -> CstgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ExperimentConfig::from_json(read_str(config_json, "config_json")?).map_err(lift)?;
        let owned;
        let data = match ds.as_ref() {
            Some(d) => &d.inner,
            None => {
                owned = cfg.dataset.load().map_err(lift)?;
                &owned
            }
        };
        let run = run_on(data, &cfg, 1).map_err(lift)?;
        let fold = run
            .folds
            .into_iter()
            .next()
            .ok_or_else(|| (CstgStatus::Internal, "run produced no folds".to_string()))?;
        *out = Box::into_raw(Box::new(CstgModel {
            inner: fold.result.model,
            metric: fold.metric,
        }));
        Ok(())
    })
}

/// Test metric of the returned fold (accuracy in percent or R²); NaN for null.
///
/// # Safety
/// `m` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn cstg_model_metric(m: *const CstgModel) -> f64 {
    m.as_ref().map_or(f64::NAN, |m| m.metric)
}

/// Number of gated features, or 0 when the model has no gates.
///
/// # Safety
/// `m` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn cstg_model_n_gates(m: *const CstgModel) -> usize {
    m.as_ref()
        .and_then(|m| m.inner.gates.as_ref())
        .map_or(0, |g| g.n_features())
}

/// Eval-mode gate values for `rows` contexts of width `cols` (row-major).
/// Writes `rows * cstg_model_n_gates(m)` values to `out_gates`.
///
/// # Safety
/// `z` must hold `rows * cols` doubles and `out_gates` room for the output.
#[no_mangle]
pub unsafe extern "C" fn cstg_model_gates(
    m: *const CstgModel,
    z: *const f64,
    rows: usize,
    cols: usize,
    out_gates: *mut f64,
) -> CstgStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        if out_gates.is_null() {
            return Err(null("out_gates"));
        }
        let gm = m
            .inner
            .gates
            .as_ref()
            .ok_or_else(|| (CstgStatus::InvalidArgument, "model has no gates".to_string()))?;
        let z = read_matrix(z, rows, cols, "z")?;
        let table = gm.eval(&z).map_err(lift)?;
        let d = gm.n_features();
        let g = table.gate.data();
        for r in 0..rows {
            // a global gate vector is shared by all rows
            let src = if g.len() == d { g } else { &g[r * d..(r + 1) * d] };
            ptr::copy_nonoverlapping(src.as_ptr(), out_gates.add(r * d), d);
        }
        Ok(())
    })
}

/// Eval-mode predictions for `rows` samples: `x` is `rows x n_x`, `z` is
/// `rows x n_z`. Writes `rows` values to `out`.
///
/// # Safety
/// Buffers must match the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn cstg_model_predict(
    m: *const CstgModel,
    x: *const f64,
    n_x: usize,
    z: *const f64,
    n_z: usize,
    rows: usize,
    out: *mut f64,
) -> CstgStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let xt = read_matrix(x, rows, n_x, "x")?;
        let zt = read_matrix(z, rows, n_z, "z")?;
        let ds = Dataset::new(xt, zt, vec![0.0; rows], m.inner.task).map_err(lift)?;
        let pred = m.inner.predict(&ds).map_err(lift)?;
        ptr::copy_nonoverlapping(pred.as_ptr(), out, rows);
        Ok(())
    })
}

/// Serialize the model checkpoint as JSON. Free the string with
/// [`cstg_string_free`].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cstg_model_checkpoint_json(m: *const CstgModel, out: *mut *mut c_char) -> CstgStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let text = serde_json::to_string(&m.inner.to_checkpoint()).map_err(|e| lift(e.into()))?;
        *out = CString::new(text)
            .map_err(|_| (CstgStatus::Internal, "checkpoint contains NUL".to_string()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cstg_model_free(m: *mut CstgModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cstg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
