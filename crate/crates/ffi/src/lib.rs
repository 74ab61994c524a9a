//! C ABI over the `crscombine` library.
//!
//! Every function returns a [`CrsStatus`]; results go through out-pointers.
//! On failure the message is available from [`crs_last_error`] on the same
//! thread until the next failing call. Panics are caught at the boundary
//! and reported as [`CrsStatus::Panic`].
//!
//! Panels are opaque: create one with [`crs_panel_load`] and release it
//! with [`crs_panel_free`].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use crscombine::combiner::{combine_k1, K1Options};
use crscombine::crs::run_test;
use crscombine::data::load_panel;
use crscombine::power::{power_k1, power_mc};
use crscombine::{
    Error, Grouping, Hypothesis, LimitParams, PanelDataset, PsiMatrix, RegressionSpec, Schema,
};

/// Status codes returned by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Identification = 5,
    Bound = 6,
    Infeasible = 7,
    Estimation = 8,
    Panic = 99,
}

/// A loaded panel data set.
pub struct CrsPanel {
    inner: PanelDataset,
}

/// Outcome of one test.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CrsTestResult {
    pub statistic: f64,
    pub critical_value: f64,
    /// 1 when the null is rejected, 0 otherwise.
    pub reject: i32,
    /// Number of top randomization values the statistic may occupy.
    pub k: usize,
    /// Number of groups.
    pub q: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CrsStatus {
    match e {
        Error::Io { .. } => CrsStatus::Io,
        Error::Schema(_) | Error::Parse { .. } | Error::Formula(_) => CrsStatus::Parse,
        Error::Identification { .. } | Error::UnidentifiedGroup(_) => CrsStatus::Identification,
        Error::Bound { .. } => CrsStatus::Bound,
        Error::AllInfeasible(_) => CrsStatus::Infeasible,
        Error::Estimation(_) => CrsStatus::Estimation,
        _ => CrsStatus::InvalidArgument,
    }
}

struct Fail(CrsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CrsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CrsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CrsStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CrsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CrsStatus::InvalidArgument, format!("{what} is not UTF-8")))
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

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn crs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn crs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a CSV panel.
///
/// `time_col` may be null when the file has no time column.
/// `covariates` is a comma-separated list of column names.
///
/// # Safety
/// String arguments must be nul-terminated; id arrays must hold the given
/// number of elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crs_panel_load(
    path: *const c_char,
    cluster_col: *const c_char,
    time_col: *const c_char,
    outcome: *const c_char,
    covariates: *const c_char,
    controls: *const i64,
    n_controls: usize,
    treated: *const i64,
    n_treated: usize,
    out: *mut *mut CrsPanel,
) -> CrsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = text(path, "path")?;
        let cluster = text(cluster_col, "cluster_col")?;
        let time = if time_col.is_null() { None } else { Some(text(time_col, "time_col")?) };
        let outcome = text(outcome, "outcome")?;
        let covs: Vec<&str> = text(covariates, "covariates")?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        let schema = Schema::new(cluster, time, outcome, &covs);
        let controls: BTreeSet<i64> = slice(controls, n_controls, "controls")?.iter().copied().collect();
        let treated: BTreeSet<i64> = slice(treated, n_treated, "treated")?.iter().copied().collect();
        let inner = load_panel(path, &schema, &controls, &treated)?;
        *out = Box::into_raw(Box::new(CrsPanel { inner }));
        Ok(())
    })
}

/// Releases a panel. Null is ignored.
///
/// # Safety
/// `panel` must come from [`crs_panel_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn crs_panel_free(panel: *mut CrsPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Number of rows and of clusters of a panel.
///
/// # Safety
/// `panel` must be a live panel; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn crs_panel_shape(
    panel: *const CrsPanel,
    n_rows: *mut usize,
    n_clusters: *mut usize,
) -> CrsStatus {
    guard(|| {
        let p = panel.as_ref().ok_or_else(|| null("panel"))?;
        if n_rows.is_null() || n_clusters.is_null() {
            return Err(null("output"));
        }
        *n_rows = p.inner.n();
        *n_clusters = p.inner.num_clusters();
        Ok(())
    })
}

/// Runs the randomization test of c'beta = lambda at level alpha for a
/// grouping literal such as `1:4,2:5,3:6`.
///
/// # Safety
/// `panel` must be a live panel; strings nul-terminated; `c` must hold
/// `c_len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crs_run_test(
    panel: *const CrsPanel,
    formula: *const c_char,
    grouping: *const c_char,
    c: *const f64,
    c_len: usize,
    lambda: f64,
    alpha: f64,
    out: *mut CrsTestResult,
) -> CrsStatus {
    guard(|| {
        let p = panel.as_ref().ok_or_else(|| null("panel"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: RegressionSpec = text(formula, "formula")?.parse()?;
        let g = Grouping::parse(text(grouping, "grouping")?)?;
        let h = Hypothesis::new(slice(c, c_len, "c")?.to_vec(), lambda, alpha, 0.0)?;
        let t = run_test(&p.inner, &g, &h, &spec)?;
        *out = CrsTestResult {
            statistic: t.statistic,
            critical_value: t.critical_value,
            reject: i32::from(t.reject),
            k: t.k_budget,
            q: t.q,
        };
        Ok(())
    })
}

unsafe fn limits(xi: *const f64, sigma: *const f64, q: usize) -> Result<LimitParams, Fail> {
    Ok(LimitParams::new(
        slice(xi, q, "xi")?.to_vec(),
        slice(sigma, q, "sigma")?.to_vec(),
    )?)
}

/// Closed-form local power when the rejection budget is one.
///
/// # Safety
/// `xi` and `sigma` must hold `q` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crs_power_k1(
    xi: *const f64,
    sigma: *const f64,
    q: usize,
    delta: f64,
    out: *mut f64,
) -> CrsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = power_k1(&limits(xi, sigma, q)?, delta, None)?.value;
        Ok(())
    })
}

/// Simulated local power at level alpha with its standard error.
///
/// # Safety
/// `xi` and `sigma` must hold `q` values; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn crs_power_mc(
    xi: *const f64,
    sigma: *const f64,
    q: usize,
    delta: f64,
    alpha: f64,
    reps: u64,
    seed: u64,
    out_value: *mut f64,
    out_se: *mut f64,
) -> CrsStatus {
    guard(|| {
        if out_value.is_null() || out_se.is_null() {
            return Err(null("output"));
        }
        let p = power_mc(&limits(xi, sigma, q)?, delta, alpha, reps, seed)?;
        *out_value = p.value;
        *out_se = p.se();
        Ok(())
    })
}

/// Power-maximizing pairing for a row-major n x n matrix of
/// Psi = Phi(-xi delta / sigma) values. Writes the column of each row to
/// `out_assignment` (n entries) and the attained power to `out_power`.
/// `intervals` = 0 selects the default.
///
/// # Safety
/// `psi` must hold n*n values; `out_assignment` n writable entries.
#[no_mangle]
pub unsafe extern "C" fn crs_combine_k1(
    psi: *const f64,
    n: usize,
    delta: f64,
    intervals: usize,
    out_assignment: *mut usize,
    out_power: *mut f64,
) -> CrsStatus {
    guard(|| {
        if out_assignment.is_null() || out_power.is_null() {
            return Err(null("output"));
        }
        let values = slice(psi, n * n, "psi")?;
        let rows: Vec<Vec<f64>> = values.chunks(n.max(1)).map(<[f64]>::to_vec).collect();
        let matrix = PsiMatrix::from_values(&rows, delta)?;
        let mut opts = K1Options::default();
        if intervals > 0 {
            opts.intervals = intervals;
        }
        let res = combine_k1(&matrix, opts)?;
        let sol = res
            .solution
            .ok_or_else(|| Fail(CrsStatus::Infeasible, "no feasible pairing".into()))?;
        ptr::copy_nonoverlapping(sol.assignment.as_ptr(), out_assignment, n);
        *out_power = res.power.value;
        Ok(())
    })
}
