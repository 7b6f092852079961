//! C interface to `hermit`.
//!
//! Handles are opaque pointers created by `*_new`/`*_load`/`hermit_fit` and
//! released with the matching `*_free`. Every fallible call returns a
//! [`HermitStatus`]; on failure `hermit_last_error` holds a message for the
//! calling thread. Matrices are dense, row-major `double` buffers and
//! missing targets are NaN.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hermit::io::{load_dataset, load_model, save_model};
use hermit::model::{impute, predict_prior_mean, responsibilities};
use hermit::{Dataset, Family, FamilyKind, FitConfig, HermitError, MixtureModel, PenaltyConfig, PenaltyKind};
use ndarray::{Array2, ArrayView2};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HermitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    InvalidData = 4,
    NonFinite = 5,
    Unsupported = 6,
    Io = 7,
    Panic = 8,
}

/// Family codes accepted by [`hermit_dataset_new`] (as `uint32_t`).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HermitFamily {
    Gaussian = 0,
    Bernoulli = 1,
    Poisson = 2,
}

/// Penalty codes accepted by [`hermit_fit`] (as `uint32_t`).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HermitPenalty {
    /// Entrywise lasso on every coefficient.
    Lasso = 0,
    /// One group per feature row of each component.
    Group = 1,
}

/// Opaque dataset handle.
pub struct HermitDataset(Dataset);

/// Opaque fitted-model handle.
pub struct HermitModel(MixtureModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &HermitError) -> HermitStatus {
    match err {
        HermitError::Domain(_) | HermitError::InvalidConfig(_) => HermitStatus::InvalidArgument,
        HermitError::Dimension(_) => HermitStatus::DimensionMismatch,
        HermitError::InvalidData(_) | HermitError::Csv(_) | HermitError::Json(_) => HermitStatus::InvalidData,
        HermitError::NonFinite(_) => HermitStatus::NonFinite,
        HermitError::Unsupported(_) => HermitStatus::Unsupported,
        HermitError::Io(_) => HermitStatus::Io,
    }
}

struct Fail(HermitStatus, String);

impl From<HermitError> for Fail {
    fn from(e: HermitError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(HermitStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HermitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HermitStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HermitStatus::Panic
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

unsafe fn path<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Fail(HermitStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn copy_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>, need: usize) -> Result<(), Fail> {
    if dst.len() != need {
        return Err(Fail(HermitStatus::DimensionMismatch, format!("buffer holds {} values, {need} required", dst.len())));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s;
    }
    Ok(())
}

fn dims(n: usize, d: usize) -> Result<usize, Fail> {
    n.checked_mul(d).ok_or_else(|| Fail(HermitStatus::InvalidArgument, "dimensions overflow".into()))
}

/// Message describing the last failure on this thread; empty after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hermit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hermit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build a dataset from row-major features `x` (n by d) and targets `y`
/// (n by m, NaN marks a missing entry) with one family code per task.
///
/// # Safety
/// `x`, `y` and `families` must point to at least n*d, n*m and m readable
/// values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hermit_dataset_new(
    x: *const f64,
    y: *const f64,
    n: usize,
    d: usize,
    m: usize,
    families: *const u32,
    out: *mut *mut HermitDataset,
) -> HermitStatus {
    guard(|| {
        let xs = slice(x, dims(n, d)?, "x")?;
        let ys = slice(y, dims(n, m)?, "y")?;
        let fams = slice(families, m, "families")?;
        let tasks = fams
            .iter()
            .map(|&code| {
                let kind = match code {
                    c if c == HermitFamily::Gaussian as u32 => FamilyKind::Gaussian,
                    c if c == HermitFamily::Bernoulli as u32 => FamilyKind::Bernoulli,
                    c if c == HermitFamily::Poisson as u32 => FamilyKind::Poisson,
                    c => return Err(Fail(HermitStatus::InvalidArgument, format!("unknown family code {c}"))),
                };
                Ok(Family::new(kind))
            })
            .collect::<Result<Vec<_>, Fail>>()?;
        let xa = Array2::from_shape_vec((n, d), xs.to_vec()).expect("length checked");
        let ya = Array2::from_shape_vec((n, m), ys.to_vec()).expect("length checked");
        put(out, HermitDataset(Dataset::from_nan_targets(xa, ya, tasks)?))
    })
}

/// Load a dataset CSV plus its JSON task description.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hermit_dataset_load(
    csv_path: *const c_char,
    tasks_path: *const c_char,
    out: *mut *mut HermitDataset,
) -> HermitStatus {
    guard(|| {
        let data = load_dataset(path(csv_path, "csv_path")?, path(tasks_path, "tasks_path")?)?;
        put(out, HermitDataset(data))
    })
}

/// Write n, d and m of a dataset. Null outputs are skipped.
///
/// # Safety
/// `data` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hermit_dataset_dims(
    data: *const HermitDataset,
    n: *mut usize,
    d: *mut usize,
    m: *mut usize,
) -> HermitStatus {
    guard(|| {
        let ds = &handle(data, "data")?.0;
        for (p, v) in [(n, ds.n()), (d, ds.d()), (m, ds.m())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hermit_dataset_free(data: *mut HermitDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Fit a k-component model. `t_out` of zero uses the default iteration cap.
/// The final penalized objective is written to `objective` when non-null.
///
/// # Safety
/// `data` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hermit_fit(
    data: *const HermitDataset,
    k: usize,
    penalty: u32,
    lambda: f64,
    gamma: f64,
    t_out: usize,
    seed: u64,
    out: *mut *mut HermitModel,
    objective: *mut f64,
) -> HermitStatus {
    guard(|| {
        let ds = &handle(data, "data")?.0;
        let kind = match penalty {
            p if p == HermitPenalty::Lasso as u32 => PenaltyKind::Entrywise,
            p if p == HermitPenalty::Group as u32 => PenaltyKind::RowGroup,
            p => return Err(Fail(HermitStatus::InvalidArgument, format!("unknown penalty code {p}"))),
        };
        let pen = PenaltyConfig::new(kind, lambda).with_gamma(gamma);
        let mut cfg = FitConfig { k, seed, ..FitConfig::default() };
        if t_out > 0 {
            cfg.t_out = t_out;
        }
        let (model, _, report) = hermit::fit(ds, &pen, &cfg)?;
        if !objective.is_null() {
            *objective = report.final_objective();
        }
        put(out, HermitModel(model))
    })
}

/// Write d, m and k of a model. Null outputs are skipped.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hermit_model_dims(
    model: *const HermitModel,
    d: *mut usize,
    m: *mut usize,
    k: *mut usize,
) -> HermitStatus {
    guard(|| {
        let mdl = &handle(model, "model")?.0;
        for (p, v) in [(d, mdl.d()), (m, mdl.m()), (k, mdl.k())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copy coefficients into `out` laid out as `[feature][task][component]`;
/// `len` must equal d*m*k.
///
/// # Safety
/// `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn hermit_model_beta(model: *const HermitModel, out: *mut f64, len: usize) -> HermitStatus {
    guard(|| {
        let mdl = &handle(model, "model")?.0;
        let b = mdl.beta();
        copy_into(slice_mut(out, len, "out")?, b.iter().copied(), b.len())
    })
}

/// Copy the k mixture weights into `out`.
///
/// # Safety
/// `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn hermit_model_weights(model: *const HermitModel, out: *mut f64, len: usize) -> HermitStatus {
    guard(|| {
        let mdl = &handle(model, "model")?.0;
        copy_into(slice_mut(out, len, "out")?, mdl.pi().iter().copied(), mdl.k())
    })
}

/// Feature-only prediction: n by m mixture means for row-major features
/// `x` (n by d).
///
/// # Safety
/// `x` must hold n*d values and `out` n*m writable values.
#[no_mangle]
pub unsafe extern "C" fn hermit_predict(
    model: *const HermitModel,
    x: *const f64,
    n: usize,
    d: usize,
    out: *mut f64,
    out_len: usize,
) -> HermitStatus {
    guard(|| {
        let mdl = &handle(model, "model")?.0;
        let xv = ArrayView2::from_shape((n, d), slice(x, dims(n, d)?, "x")?).expect("length checked");
        let pred = predict_prior_mean(mdl, xv)?;
        copy_into(slice_mut(out, out_len, "out")?, pred.iter().copied(), dims(n, mdl.m())?)
    })
}

/// Impute every target of `data` (n by m) from the observed ones.
/// Observed entries receive model predictions as well.
///
/// # Safety
/// Handles must be live; `out` must hold n*m writable values.
#[no_mangle]
pub unsafe extern "C" fn hermit_impute(
    model: *const HermitModel,
    data: *const HermitDataset,
    out: *mut f64,
    out_len: usize,
) -> HermitStatus {
    guard(|| {
        let mdl = &handle(model, "model")?.0;
        let ds = &handle(data, "data")?.0;
        let pred = impute(mdl, ds)?;
        copy_into(slice_mut(out, out_len, "out")?, pred.iter().copied(), dims(ds.n(), ds.m())?)
    })
}

/// Posterior component probabilities (n by k) given the observed targets.
///
/// # Safety
/// Handles must be live; `out` must hold n*k writable values.
#[no_mangle]
pub unsafe extern "C" fn hermit_responsibilities(
    model: *const HermitModel,
    data: *const HermitDataset,
    out: *mut f64,
    out_len: usize,
) -> HermitStatus {
    guard(|| {
        let mdl = &handle(model, "model")?.0;
        let ds = &handle(data, "data")?.0;
        let rho = responsibilities(mdl, ds, None)?;
        copy_into(slice_mut(out, out_len, "out")?, rho.rho().iter().copied(), dims(ds.n(), mdl.k())?)
    })
}

/// Save a model as JSON.
///
/// # Safety
/// `model` must be live and `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hermit_model_save(model: *const HermitModel, file: *const c_char) -> HermitStatus {
    guard(|| {
        let mdl = &handle(model, "model")?.0;
        Ok(save_model(path(file, "path")?, mdl, None)?)
    })
}

/// Load a model saved by [`hermit_model_save`] or the command-line tool.
/// Gated models are rejected.
///
/// # Safety
/// `file` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hermit_model_load(file: *const c_char, out: *mut *mut HermitModel) -> HermitStatus {
    guard(|| {
        let (model, gate) = load_model(path(file, "path")?)?;
        if gate.is_some() {
            return Err(Fail(HermitStatus::Unsupported, "gated models are not supported through this interface".into()));
        }
        put(out, HermitModel(model))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hermit_model_free(model: *mut HermitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
