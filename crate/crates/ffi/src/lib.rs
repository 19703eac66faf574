//! C ABI over the sarqsm estimators.
//!
//! Objects are opaque handles released with the matching `_free`. Every fallible call returns a
//! `SarqsmStatus`; on failure the message is kept per thread and read with
//! `sarqsm_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sarqsm::linalg::{DenseMatrix, SparseWeights};
use sarqsm::{qmle, qsm, FitOptions, FitReport, SarData, SarError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SarqsmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidInput = 2,
    Numeric = 3,
    BufferTooSmall = 4,
    Unavailable = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SarqsmMethod {
    Qsm = 0,
    QsmImproved = 1,
    Qmle = 2,
}

/// Response, covariates and weights of one network.
pub struct SarqsmData {
    inner: SarData,
}

/// Estimates (λ, β, σ²) and, when requested, standard errors.
pub struct SarqsmFit {
    inner: FitReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: SarqsmStatus, msg: impl Into<String>) -> SarqsmStatus {
    set_error(msg);
    status
}

fn from_core(e: SarError) -> SarqsmStatus {
    let status = if e.is_input_error() { SarqsmStatus::InvalidInput } else { SarqsmStatus::Numeric };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> SarqsmStatus) -> SarqsmStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(SarqsmStatus::Panic, format!("panic: {msg}"))
        }
    }
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(p: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if p.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(p, len))
    }
}

/// Builds a data handle.
///
/// `x` holds the n×p covariates in column-major order. Edge k runs from `from[k]` to `to[k]`
/// (0-based) with weight `weights[k]`, or 1 when `weights` is null. Self-loops are rejected.
/// With `row_normalize`, rows of W are scaled to sum to one and empty rows stay zero.
///
/// # Safety
/// `y` must be valid for n reads, `x` for n·p, `from`, `to` and non-null `weights` for
/// `n_edges`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sarqsm_data_new(
    n: usize,
    p: usize,
    y: *const f64,
    x: *const f64,
    n_edges: usize,
    from: *const usize,
    to: *const usize,
    weights: *const f64,
    row_normalize: bool,
    out: *mut *mut SarqsmData,
) -> SarqsmStatus {
    guard(|| {
        if out.is_null() {
            return fail(SarqsmStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let Some(nxp) = n.checked_mul(p) else {
            return fail(SarqsmStatus::InvalidInput, "n * p overflows");
        };
        let (Some(y), Some(x), Some(from), Some(to)) = (slice(y, n), slice(x, nxp), slice(from, n_edges), slice(to, n_edges)) else {
            return fail(SarqsmStatus::NullArgument, "y, x, from or to is null");
        };
        let w: Vec<f64> = if weights.is_null() {
            vec![1.0; n_edges]
        } else {
            std::slice::from_raw_parts(weights, n_edges).to_vec()
        };
        let mut triplets = Vec::with_capacity(n_edges);
        for k in 0..n_edges {
            if from[k] == to[k] {
                return fail(SarqsmStatus::InvalidInput, format!("edge {k} is a self-loop on node {}", from[k]));
            }
            triplets.push((from[k], to[k], w[k]));
        }
        let built = SparseWeights::from_triplets(n, &triplets)
            .map(|sw| if row_normalize { sw.row_normalize().weights } else { sw })
            .and_then(|sw| Ok((sw, DenseMatrix::from_col_major(n, p, x.to_vec())?)))
            .and_then(|(sw, xm)| SarData::new(y.to_vec(), xm, sw));
        match built {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SarqsmData { inner }));
                SarqsmStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// # Safety
/// `data` must be null or a handle from `sarqsm_data_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sarqsm_data_free(data: *mut SarqsmData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sarqsm_data_n(data: *const SarqsmData) -> usize {
    data.as_ref().map_or(0, |d| d.inner.n())
}

/// D_n^c(λ), the concentrated quasi-score matching objective.
///
/// # Safety
/// `data` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sarqsm_concentrated_objective(data: *const SarqsmData, lambda: f64, out: *mut f64) -> SarqsmStatus {
    guard(|| {
        let (Some(d), false) = (data.as_ref(), out.is_null()) else {
            return fail(SarqsmStatus::NullArgument, "data or out is null");
        };
        match qsm::concentrated_objective(&d.inner, lambda) {
            Ok(v) => {
                *out = v;
                SarqsmStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Fits one estimator. The improved estimator runs QSM first for λ̂.
///
/// # Safety
/// `data` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sarqsm_fit(data: *const SarqsmData, method: SarqsmMethod, inference: bool, out: *mut *mut SarqsmFit) -> SarqsmStatus {
    guard(|| {
        if out.is_null() {
            return fail(SarqsmStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let Some(d) = data.as_ref() else {
            return fail(SarqsmStatus::NullArgument, "data is null");
        };
        let opts = FitOptions { inference, ..FitOptions::default() };
        let res = match method {
            SarqsmMethod::Qsm => qsm::fit_qsm(&d.inner, &opts),
            SarqsmMethod::Qmle => qmle::fit_qmle(&d.inner, &opts),
            SarqsmMethod::QsmImproved => {
                let bare = FitOptions { inference: false, ..opts.clone() };
                qsm::fit_qsm(&d.inner, &bare).and_then(|q| qsm::fit_improved_with(&d.inner, q.theta.lambda, &opts))
            }
        };
        match res {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SarqsmFit { inner }));
                SarqsmStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// # Safety
/// `fit` must be null or a handle from `sarqsm_fit` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sarqsm_fit_free(fit: *mut SarqsmFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Length of the parameter vector (λ, β₁..β_p, σ²), or 0 for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sarqsm_fit_dim(fit: *const SarqsmFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.theta.dim())
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> SarqsmStatus {
    if out.is_null() {
        return fail(SarqsmStatus::NullArgument, "out is null");
    }
    if len < src.len() {
        return fail(SarqsmStatus::BufferTooSmall, format!("buffer holds {len} values, {} needed", src.len()));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    SarqsmStatus::Ok
}

/// Writes (λ, β₁..β_p, σ²) into `out`.
///
/// # Safety
/// `fit` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sarqsm_fit_theta(fit: *const SarqsmFit, out: *mut f64, len: usize) -> SarqsmStatus {
    guard(|| match fit.as_ref() {
        Some(f) => copy_out(&f.inner.theta.to_vec(), out, len),
        None => fail(SarqsmStatus::NullArgument, "fit is null"),
    })
}

/// Writes standard errors in the order of `sarqsm_fit_theta`. Unavailable without inference.
///
/// # Safety
/// `fit` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sarqsm_fit_std_errors(fit: *const SarqsmFit, out: *mut f64, len: usize) -> SarqsmStatus {
    guard(|| match fit.as_ref() {
        Some(f) if f.inner.std_errors.is_empty() => fail(SarqsmStatus::Unavailable, "fit has no standard errors"),
        Some(f) => copy_out(&f.inner.std_errors, out, len),
        None => fail(SarqsmStatus::NullArgument, "fit is null"),
    })
}

/// Bytes in the last error message of this thread, excluding the NUL; 0 when none.
#[no_mangle]
pub extern "C" fn sarqsm_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |s| s.as_bytes().len()))
}

/// Copies the last error message, NUL-terminated and truncated to `len - 1` bytes.
/// Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sarqsm_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |s| s.as_bytes());
        if !buf.is_null() && len > 0 {
            let k = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, k);
            *buf.add(k) = 0;
        }
        bytes.len()
    })
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn sarqsm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
