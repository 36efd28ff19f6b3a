//! C interface to `aniso-extremal`.
//!
//! Objects are opaque handles created and released by this library. Every
//! function returns an `AeStatus`; on failure the message is available from
//! `ae_last_error` on the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use aniso_extremal::config::RunConfig;
use aniso_extremal::{default_init, epsilon_exponents, minimize, Error, ExponentVector, ExtremalResult};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Exponents = 4,
    Numerical = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Parsed run configuration.
pub struct AeConfig {
    inner: RunConfig,
}

/// Outcome of one solve.
pub struct AeResult {
    inner: ExtremalResult,
    counts: Vec<usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> AeStatus {
    match e {
        Error::BadDimension(_)
        | Error::BadUnitCount { .. }
        | Error::BadTail { .. }
        | Error::DenominatorNonpositive(_)
        | Error::SupercriticalExponent { .. }
        | Error::EpsilonTooLarge { .. }
        | Error::EmptySchedule
        | Error::InvalidExponents(_) => AeStatus::Exponents,
        Error::Config(_) | Error::Parse(_) | Error::InvalidOptions(_) | Error::InvalidGrid(_) => AeStatus::Config,
        _ => AeStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), AeStatus>) -> AeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AeStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            AeStatus::Panic
        }
    }
}

fn fail(e: Error) -> AeStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn non_null<T>(p: *const T) -> Result<(), AeStatus> {
    if p.is_null() {
        set_error("null pointer argument".into());
        Err(AeStatus::NullPointer)
    } else {
        Ok(())
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ae_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Parses a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ae_config_parse(toml: *const c_char, out: *mut *mut AeConfig) -> AeStatus {
    guard(|| {
        non_null(toml)?;
        non_null(out)?;
        let text = CStr::from_ptr(toml).to_str().map_err(|e| {
            set_error(e.to_string());
            AeStatus::InvalidUtf8
        })?;
        let cfg = RunConfig::parse(text).map_err(fail)?;
        *out = Box::into_raw(Box::new(AeConfig { inner: cfg }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from `ae_config_parse` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ae_config_free(cfg: *mut AeConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Minimizes at the configured `solve.eps` from the default initial guess.
/// A solve that stops without converging still returns `AE_STATUS_OK`;
/// check `converged` in `ae_result_summary`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ae_solve(cfg: *const AeConfig, out: *mut *mut AeResult) -> AeStatus {
    guard(|| {
        non_null(cfg)?;
        non_null(out)?;
        let c = &(*cfg).inner;
        let setup = c.solve_setup().map_err(fail)?;
        let init = default_init(&setup.grid, setup.level.critical).map_err(fail)?;
        let res = minimize(&init, &setup.level, &c.solver).map_err(fail)?;
        *out = Box::into_raw(Box::new(AeResult {
            counts: setup.grid.counts().to_vec(),
            inner: res,
        }));
        Ok(())
    })
}

/// # Safety
/// `res` must be null or a handle from `ae_solve` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ae_result_free(res: *mut AeResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Scalar outputs of a solve.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AeSummary {
    pub k_eps: f64,
    pub l_eps: f64,
    pub residual: f64,
    pub iters: usize,
    pub converged: bool,
}

/// # Safety
/// `res` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ae_result_summary(res: *const AeResult, out: *mut AeSummary) -> AeStatus {
    guard(|| {
        non_null(res)?;
        non_null(out)?;
        let r = &(*res).inner;
        *out = AeSummary {
            k_eps: r.k_eps,
            l_eps: r.l_eps,
            residual: r.residual,
            iters: r.iters,
            converged: r.converged,
        };
        Ok(())
    })
}

/// Number of grid nodes; with `counts` non-null, also writes the node count
/// per stored axis (`dim` entries, at most `counts_len`).
///
/// # Safety
/// `res` must be a live handle; `nodes` valid for writes; `counts` null or
/// valid for `counts_len` entries.
#[no_mangle]
pub unsafe extern "C" fn ae_result_shape(
    res: *const AeResult,
    nodes: *mut usize,
    counts: *mut usize,
    counts_len: usize,
) -> AeStatus {
    guard(|| {
        non_null(res)?;
        non_null(nodes)?;
        let r = &*res;
        *nodes = r.inner.u.values().len();
        if !counts.is_null() {
            if counts_len < r.counts.len() {
                set_error(format!("need {} entries for the counts", r.counts.len()));
                return Err(AeStatus::BufferTooSmall);
            }
            ptr::copy_nonoverlapping(r.counts.as_ptr(), counts, r.counts.len());
        }
        Ok(())
    })
}

/// Copies the extremal's nodal values, last stored axis fastest.
///
/// # Safety
/// `res` must be a live handle; `buf` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ae_result_values(res: *const AeResult, buf: *mut f64, len: usize) -> AeStatus {
    guard(|| {
        non_null(res)?;
        non_null(buf)?;
        let v = (*res).inner.u.values();
        if len < v.len() {
            set_error(format!("need {} values", v.len()));
            return Err(AeStatus::BufferTooSmall);
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        Ok(())
    })
}

/// Critical exponent `p*` for exponents given in any axis order.
///
/// # Safety
/// `p` must be valid for `n` doubles; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ae_critical_exponent(p: *const f64, n: usize, out: *mut f64) -> AeStatus {
    guard(|| {
        non_null(p)?;
        non_null(out)?;
        let x = ExponentVector::from_unordered(std::slice::from_raw_parts(p, n)).map_err(fail)?;
        *out = x.p_star();
        Ok(())
    })
}

/// `p*_eps` and `lambda_eps` at level `eps`.
///
/// # Safety
/// `p` must be valid for `n` doubles; the outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ae_epsilon_exponents(
    p: *const f64,
    n: usize,
    eps: f64,
    p_star_eps: *mut f64,
    lambda_eps: *mut f64,
) -> AeStatus {
    guard(|| {
        non_null(p)?;
        non_null(p_star_eps)?;
        non_null(lambda_eps)?;
        let x = ExponentVector::from_unordered(std::slice::from_raw_parts(p, n)).map_err(fail)?;
        let ee = epsilon_exponents(&x, eps).map_err(fail)?;
        *p_star_eps = ee.p_star_eps;
        *lambda_eps = ee.lambda_eps;
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
