//! C ABI for the homent estimators.
//!
//! Every function returns a [`HomentStatus`]; on failure the message is kept
//! per thread and can be read with [`homent_last_error`]. Handles are opaque
//! and must be released with the matching `_free` function. Matrices cross
//! the boundary as row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use homent::dgp::ShockDistributionSpec;
use homent::estimators::{self, EstimateResult, EstimatorKind, EstimatorOptions};
use homent::mc::{run_scenario, RunOptions, Scenario, ShockSpecs};
use homent::moment_index::{enumerate_moment_indices, MomentSystem};
use homent::svar::{Innovations, ShockPanel};
use homent::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HomentStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    BufferTooSmall = 4,
    Singular = 5,
    Unidentified = 6,
    Unavailable = 7,
    Io = 8,
    Panic = 9,
}

/// Reduced-form shock panel.
pub struct HomentPanel {
    panel: ShockPanel,
}

/// Estimation result together with the moment system it used.
pub struct HomentEstimate {
    result: EstimateResult,
    system: MomentSystem,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HomentStatus {
    match e {
        Error::DimensionMismatch(_) => HomentStatus::DimensionMismatch,
        Error::SingularMatrix { .. } | Error::DegenerateInnovation { .. } => HomentStatus::Singular,
        Error::Unidentified(_) => HomentStatus::Unidentified,
        Error::Io(_) | Error::Csv(_) => HomentStatus::Io,
        _ => HomentStatus::InvalidArgument,
    }
}

fn fail(status: HomentStatus, msg: impl Into<String>) -> HomentStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), HomentStatus>>(f: F) -> HomentStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HomentStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(HomentStatus::Panic, format!("panic: {msg}"))
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, HomentStatus>;
}

impl<T> OrStatus<T> for homent::Result<T> {
    fn or_status(self) -> Result<T, HomentStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, HomentStatus> {
    if p.is_null() {
        return Err(fail(HomentStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HomentStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], HomentStatus> {
    if p.is_null() {
        return Err(fail(HomentStatus::NullPointer, "output buffer is NULL"));
    }
    if len < need {
        return Err(fail(HomentStatus::BufferTooSmall, format!("buffer holds {len} values, {need} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn orders_of(orders: *const u32, n_orders: usize) -> Result<Vec<u32>, HomentStatus> {
    if n_orders == 0 {
        return Ok(vec![2, 3, 4]);
    }
    if orders.is_null() {
        return Err(fail(HomentStatus::NullPointer, "orders is NULL"));
    }
    Ok(std::slice::from_raw_parts(orders, n_orders).to_vec())
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn homent_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn homent_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn homent_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Number of moment conditions for `n` shocks and the given orders
/// (`n_orders == 0` selects orders 2, 3 and 4).
///
/// # Safety
/// `orders` must point to `n_orders` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn homent_moment_condition_count(
    n: usize,
    orders: *const u32,
    n_orders: usize,
    out: *mut usize,
) -> HomentStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(HomentStatus::NullPointer, "out is NULL"));
        }
        let sys = enumerate_moment_indices(n, &orders_of(orders, n_orders)?).or_status()?;
        *out = sys.len();
        Ok(())
    })
}

/// Copies a row-major `t x n` array into a new panel.
///
/// # Safety
/// `data` must point to `t * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn homent_panel_new(data: *const f64, t: usize, n: usize, out: *mut *mut HomentPanel) -> HomentStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return Err(fail(HomentStatus::NullPointer, "data or out is NULL"));
        }
        let len = t.checked_mul(n).ok_or_else(|| fail(HomentStatus::InvalidArgument, "t * n overflows"))?;
        let values = std::slice::from_raw_parts(data, len);
        let panel = ShockPanel::new(nalgebra::DMatrix::from_row_slice(t, n, values)).or_status()?;
        *out = Box::into_raw(Box::new(HomentPanel { panel }));
        Ok(())
    })
}

/// # Safety
/// `panel` must come from [`homent_panel_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn homent_panel_free(panel: *mut HomentPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Estimates `B` with the named estimator (`"csue2"`, `"gmm2"`, ...).
/// `shocks_json` is a JSON distribution, or an array of them, and may be
/// NULL unless the estimator needs the true distributions.
///
/// # Safety
/// Pointers must be valid as described; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn homent_estimate(
    panel: *const HomentPanel,
    estimator: *const c_char,
    orders: *const u32,
    n_orders: usize,
    shocks_json: *const c_char,
    out: *mut *mut HomentEstimate,
) -> HomentStatus {
    guard(|| {
        if panel.is_null() || out.is_null() {
            return Err(fail(HomentStatus::NullPointer, "panel or out is NULL"));
        }
        let u = &(*panel).panel;
        let kind: EstimatorKind = c_str(estimator, "estimator")?.parse().or_status()?;
        let system = enumerate_moment_indices(u.n(), &orders_of(orders, n_orders)?).or_status()?;
        let dists = if shocks_json.is_null() {
            None
        } else {
            let specs: ShockSpecs = serde_json::from_str(c_str(shocks_json, "shocks_json")?)
                .map_err(|e| fail(HomentStatus::InvalidArgument, format!("shocks_json: {e}")))?;
            Some(match specs {
                ShockSpecs::Common(s) => vec![s; u.n()],
                ShockSpecs::PerShock(v) => v,
            })
        };
        let result = estimators::estimate(kind, u, &system, dists.as_deref(), &EstimatorOptions::default()).or_status()?;
        *out = Box::into_raw(Box::new(HomentEstimate { result, system }));
        Ok(())
    })
}

/// # Safety
/// `est` must come from [`homent_estimate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn homent_estimate_free(est: *mut HomentEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

unsafe fn estimate_ref<'a>(est: *const HomentEstimate) -> Result<&'a HomentEstimate, HomentStatus> {
    est.as_ref().ok_or_else(|| fail(HomentStatus::NullPointer, "estimate is NULL"))
}

/// Dimension `n` of the estimate.
///
/// # Safety
/// `est` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn homent_estimate_dim(est: *const HomentEstimate, out: *mut usize) -> HomentStatus {
    guard(|| {
        let e = estimate_ref(est)?;
        if out.is_null() {
            return Err(fail(HomentStatus::NullPointer, "out is NULL"));
        }
        *out = e.result.b_hat.n();
        Ok(())
    })
}

/// Writes the normalized `n x n` estimate, row-major.
///
/// # Safety
/// `est` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn homent_estimate_b(est: *const HomentEstimate, out: *mut f64, len: usize) -> HomentStatus {
    guard(|| {
        let e = estimate_ref(est)?;
        let n = e.result.b_hat.n();
        let dst = out_slice(out, len, n * n)?;
        for (d, v) in dst.iter_mut().zip(e.result.b_hat.to_rows().into_iter().flatten()) {
            *d = v;
        }
        Ok(())
    })
}

/// Writes the `n^2 x n^2` asymptotic covariance of `vec(B)` (column-major
/// `vec`), row-major. Returns `UNAVAILABLE` when `G` is rank deficient.
///
/// # Safety
/// `est` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn homent_estimate_avar(est: *const HomentEstimate, out: *mut f64, len: usize) -> HomentStatus {
    guard(|| {
        let e = estimate_ref(est)?;
        let v = e
            .result
            .avar
            .as_ref()
            .ok_or_else(|| fail(HomentStatus::Unavailable, "asymptotic covariance unavailable"))?;
        let k = v.nrows();
        let dst = out_slice(out, len, k * k)?;
        for r in 0..k {
            for c in 0..k {
                dst[r * k + c] = v[(r, c)];
            }
        }
        Ok(())
    })
}

/// Loss at the optimum, convergence flag (0/1), and iteration count; any
/// output pointer may be NULL.
///
/// # Safety
/// `est` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn homent_estimate_diagnostics(
    est: *const HomentEstimate,
    loss: *mut f64,
    converged: *mut i32,
    iterations: *mut usize,
) -> HomentStatus {
    guard(|| {
        let e = estimate_ref(est)?;
        if !loss.is_null() {
            *loss = e.result.loss;
        }
        if !converged.is_null() {
            *converged = i32::from(e.result.converged);
        }
        if !iterations.is_null() {
            *iterations = e.result.iterations;
        }
        Ok(())
    })
}

/// Sample variances of the innovations `B_hat^-1 u_t`.
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn homent_estimate_innovation_variances(
    est: *const HomentEstimate,
    panel: *const HomentPanel,
    out: *mut f64,
    len: usize,
) -> HomentStatus {
    guard(|| {
        let e = estimate_ref(est)?;
        let p = panel.as_ref().ok_or_else(|| fail(HomentStatus::NullPointer, "panel is NULL"))?;
        if p.panel.n() != e.system.n() {
            return Err(fail(HomentStatus::DimensionMismatch, "panel does not match the estimate"));
        }
        let v = Innovations::new(&e.result.b_hat, &p.panel).or_status()?.variances();
        out_slice(out, len, v.len())?.copy_from_slice(&v);
        Ok(())
    })
}

/// Standardized raw moments `E[e^r]`, `r = 0..=max_order`, of a JSON distribution.
///
/// # Safety
/// `spec_json` must be NUL-terminated; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn homent_population_moments(
    spec_json: *const c_char,
    max_order: usize,
    out: *mut f64,
    len: usize,
) -> HomentStatus {
    guard(|| {
        let spec: ShockDistributionSpec = serde_json::from_str(c_str(spec_json, "spec_json")?)
            .map_err(|e| fail(HomentStatus::InvalidArgument, format!("spec_json: {e}")))?;
        spec.validate().or_status()?;
        let m = spec.population_moments(max_order).or_status()?;
        out_slice(out, len, m.len())?.copy_from_slice(&m);
        Ok(())
    })
}

/// Runs (or resumes) a scenario file into `out_dir`; `threads == 0` uses every core.
///
/// # Safety
/// Both strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn homent_run_scenario(path: *const c_char, out_dir: *const c_char, threads: usize) -> HomentStatus {
    guard(|| {
        let sc = Scenario::load(std::path::Path::new(c_str(path, "path")?)).or_status()?;
        let opts = RunOptions {
            threads: (threads > 0).then_some(threads),
            out_dir: Some(PathBuf::from(c_str(out_dir, "out_dir")?)),
            ..Default::default()
        };
        run_scenario(&sc, &opts).or_status()?;
        Ok(())
    })
}
