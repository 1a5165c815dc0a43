//! C ABI over the `chivar` core.
//!
//! Every fallible function returns a [`ChivarStatus`]; on failure the message
//! is kept per thread and read back with [`chivar_last_error_message`].
//! Handles are boxed Rust values behind opaque pointers and must be released
//! with the matching `_free` function.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use chivar::covariation::{epsilon_covariation, CovariationCurve};
use chivar::flow::{brownian_path, SdeModel};
use chivar::maps::SmoothMap;
use chivar::paths::{SampledPath, TimeGrid};
use chivar::pde_chain::{black_scholes_call, solve_chain, ChainSettings, ChainSolution};
use chivar::Error;
use serde::Deserialize;

/// Result codes shared by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChivarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Unsupported = 4,
    Degenerate = 5,
    Io = 6,
    Parse = 7,
    Panic = 8,
}

/// A sampled path on a uniform grid.
pub struct ChivarPath {
    inner: SampledPath,
}

/// A covariation curve `t ↦ [X, Y]^ε_t` on the grid nodes.
pub struct ChivarCurve {
    inner: CovariationCurve,
}

/// A solved PDE chain.
pub struct ChivarChain {
    inner: ChainSolution,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> ChivarStatus {
    match e {
        Error::InvalidArgument(_) => ChivarStatus::InvalidArgument,
        Error::Unsupported(_) => ChivarStatus::Unsupported,
        Error::DegenerateDenominator(_) => ChivarStatus::Degenerate,
        Error::Config { .. } => ChivarStatus::Config,
        Error::Parse(_) | Error::Json(_) => ChivarStatus::Parse,
        Error::Io(_) => ChivarStatus::Io,
    }
}

/// Runs `f`, recording its error or panic.
fn guard(f: impl FnOnce() -> Result<(), (ChivarStatus, String)>) -> ChivarStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ChivarStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside chivar");
            ChivarStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (ChivarStatus, String)>;
}

impl<T> IntoFfi<T> for chivar::Result<T> {
    fn ffi(self) -> Result<T, (ChivarStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (ChivarStatus, String) {
    (ChivarStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (ChivarStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (ChivarStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (ChivarStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Last error message on this thread, or null. Valid until the next call
/// into this library from the same thread.
#[no_mangle]
pub extern "C" fn chivar_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn chivar_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `len` samples (one per grid node, `len = steps + 1`) into a new path.
#[no_mangle]
pub unsafe extern "C" fn chivar_path_new(
    horizon: f64,
    steps: usize,
    values: *const f64,
    len: usize,
    out: *mut *mut ChivarPath,
) -> ChivarStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let grid = TimeGrid::new(horizon, steps).ffi()?;
        let values = slice_arg(values, len, "values")?;
        let inner = SampledPath::new(grid, values.to_vec()).ffi()?;
        put(out, ChivarPath { inner });
        Ok(())
    })
}

/// Standard Brownian path number `index` of the stream `seed`.
#[no_mangle]
pub unsafe extern "C" fn chivar_path_brownian(
    horizon: f64,
    steps: usize,
    seed: u64,
    index: u64,
    out: *mut *mut ChivarPath,
) -> ChivarStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let grid = TimeGrid::new(horizon, steps).ffi()?;
        put(out, ChivarPath { inner: brownian_path(grid, seed, index) });
        Ok(())
    })
}

/// Number of samples, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn chivar_path_len(path: *const ChivarPath) -> usize {
    path.as_ref().map_or(0, |p| p.inner.values().len())
}

/// Copies up to `cap` samples into `buf`; `written` receives the count.
#[no_mangle]
pub unsafe extern "C" fn chivar_path_values(path: *const ChivarPath, buf: *mut f64, cap: usize, written: *mut usize) -> ChivarStatus {
    guard(|| {
        let p = path.as_ref().ok_or_else(|| null("path"))?;
        copy_out(p.inner.values(), buf, cap, written)
    })
}

#[no_mangle]
pub unsafe extern "C" fn chivar_path_free(path: *mut ChivarPath) {
    if !path.is_null() {
        drop(Box::from_raw(path));
    }
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, cap: usize, written: *mut usize) -> Result<(), (ChivarStatus, String)> {
    if written.is_null() {
        return Err(null("written"));
    }
    let n = src.len().min(cap);
    if n > 0 {
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), buf, n);
    }
    *written = n;
    Ok(())
}

/// `[X, Y]^ε` on the common grid of `x` and `y`.
#[no_mangle]
pub unsafe extern "C" fn chivar_epsilon_covariation(
    x: *const ChivarPath,
    y: *const ChivarPath,
    epsilon: f64,
    out: *mut *mut ChivarCurve,
) -> ChivarStatus {
    guard(|| {
        let x = x.as_ref().ok_or_else(|| null("x"))?;
        let y = y.as_ref().ok_or_else(|| null("y"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = epsilon_covariation(&x.inner, &y.inner, epsilon).ffi()?;
        put(out, ChivarCurve { inner });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn chivar_curve_len(curve: *const ChivarCurve) -> usize {
    curve.as_ref().map_or(0, |c| c.inner.values().len())
}

#[no_mangle]
pub unsafe extern "C" fn chivar_curve_values(curve: *const ChivarCurve, buf: *mut f64, cap: usize, written: *mut usize) -> ChivarStatus {
    guard(|| {
        let c = curve.as_ref().ok_or_else(|| null("curve"))?;
        copy_out(c.inner.values(), buf, cap, written)
    })
}

/// Value at the horizon.
#[no_mangle]
pub unsafe extern "C" fn chivar_curve_last(curve: *const ChivarCurve, value: *mut f64) -> ChivarStatus {
    guard(|| {
        let c = curve.as_ref().ok_or_else(|| null("curve"))?;
        if value.is_null() {
            return Err(null("value"));
        }
        *value = c.inner.last();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn chivar_curve_free(curve: *mut ChivarCurve) {
    if !curve.is_null() {
        drop(Box::from_raw(curve));
    }
}

/// Zero-rate Black–Scholes call price.
#[no_mangle]
pub extern "C" fn chivar_black_scholes_call(spot: f64, strike: f64, sigma: f64, maturity: f64) -> f64 {
    black_scholes_call(spot, strike, sigma, maturity)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainRequest {
    map: SmoothMap,
    model: SdeModel,
    anchors: Vec<f64>,
    settings: ChainSettings,
}

/// Solves a PDE chain described by JSON with keys `map`, `model`, `anchors`
/// and `settings`.
#[no_mangle]
pub unsafe extern "C" fn chivar_chain_solve_json(request: *const c_char, out: *mut *mut ChivarChain) -> ChivarStatus {
    guard(|| {
        let text = str_arg(request, "request")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let req: ChainRequest =
            serde_json::from_str(text).map_err(|e| (ChivarStatus::Parse, format!("chain request: {e}")))?;
        let inner = solve_chain(&req.map, &req.model, &req.anchors, &req.settings).ffi()?;
        put(out, ChivarChain { inner });
        Ok(())
    })
}

unsafe fn chain_query(
    chain: *const ChivarChain,
    params: *const f64,
    n_params: usize,
    t: f64,
    y: f64,
    value: *mut f64,
    clamped: *mut bool,
    gradient: bool,
) -> ChivarStatus {
    guard(|| {
        let c = chain.as_ref().ok_or_else(|| null("chain"))?;
        if value.is_null() {
            return Err(null("value"));
        }
        let params = slice_arg(params, n_params, "params")?;
        let level = c.inner.level_of(t).ffi()?;
        if params.len() != level {
            return Err((
                ChivarStatus::InvalidArgument,
                format!("time {t} lies in interval {} which needs {level} frozen coordinates", level + 1),
            ));
        }
        let q = if gradient { c.inner.gradient(level, params, t, y) } else { c.inner.value(level, params, t, y) }.ffi()?;
        *value = q.value;
        if !clamped.is_null() {
            *clamped = q.clamped;
        }
        Ok(())
    })
}

/// `ν(params; t, y)` on the interval containing `t`; `params` holds the
/// path values at the anchors before `t`. `clamped` may be null.
#[no_mangle]
pub unsafe extern "C" fn chivar_chain_value(
    chain: *const ChivarChain,
    params: *const f64,
    n_params: usize,
    t: f64,
    y: f64,
    value: *mut f64,
    clamped: *mut bool,
) -> ChivarStatus {
    chain_query(chain, params, n_params, t, y, value, clamped, false)
}

/// `∂_y ν(params; t, y)`, the hedge ratio.
#[no_mangle]
pub unsafe extern "C" fn chivar_chain_gradient(
    chain: *const ChivarChain,
    params: *const f64,
    n_params: usize,
    t: f64,
    y: f64,
    value: *mut f64,
    clamped: *mut bool,
) -> ChivarStatus {
    chain_query(chain, params, n_params, t, y, value, clamped, true)
}

/// Writes `chain.json` and one CSV per interval into `dir`.
#[no_mangle]
pub unsafe extern "C" fn chivar_chain_save(chain: *const ChivarChain, dir: *const c_char) -> ChivarStatus {
    guard(|| {
        let c = chain.as_ref().ok_or_else(|| null("chain"))?;
        let dir = str_arg(dir, "dir")?;
        c.inner.save(Path::new(dir)).ffi()?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn chivar_chain_free(chain: *mut ChivarChain) {
    if !chain.is_null() {
        drop(Box::from_raw(chain));
    }
}

/// Runs an experiment config given as JSON text into `out_dir`. `threads`
/// of 0 uses the default pool. `passed` (may be null) receives whether every
/// numeric check passed.
#[no_mangle]
pub unsafe extern "C" fn chivar_run_experiment_json(
    config: *const c_char,
    out_dir: *const c_char,
    threads: usize,
    passed: *mut bool,
) -> ChivarStatus {
    guard(|| {
        let cfg = chivar::cli::parse_config(str_arg(config, "config")?).ffi()?;
        let dir = Path::new(str_arg(out_dir, "out_dir")?);
        let run = || chivar::cli::run_experiment(&cfg, dir);
        let outcome = if threads == 0 {
            run()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| (ChivarStatus::InvalidArgument, e.to_string()))?
                .install(run)
        }
        .ffi()?;
        if !passed.is_null() {
            *passed = outcome.passed();
        }
        Ok(())
    })
}
