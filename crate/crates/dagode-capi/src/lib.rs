//! C ABI over the dagode toolkit: dataset loading, the two structure
//! learners, acyclicity evaluation, and graph metrics, behind opaque handles
//! with integer status codes and a thread-local last-error message.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::path::Path;
use std::ptr;

use dagode::acyclicity;
use dagode::cli::load_dataset;
use dagode::graphs;
use dagode::learners::{
    fit_dag_ode, fit_notears_linear, FitResult, LearnerConfig, ThresholdRule,
};
use dagode::ndtensor::Matrix;
use dagode::scm_datagen::Dataset;
use dagode::Error;

/// Status codes returned by every fallible entry point.
pub const DAGODE_OK: c_int = 0;
/// A required pointer argument was null or an index was out of range.
pub const DAGODE_ERR_ARGUMENT: c_int = 1;
/// A precondition on the inputs was violated.
pub const DAGODE_ERR_CONTRACT: c_int = 2;
/// File, parse, or data-shape failure.
pub const DAGODE_ERR_DATA: c_int = 3;
/// Numerical or optimization failure.
pub const DAGODE_ERR_NUMERIC: c_int = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap());
}

fn code_for(e: &Error) -> c_int {
    match e {
        Error::Contract(_) | Error::Config(_) => DAGODE_ERR_CONTRACT,
        Error::Parse { .. } | Error::Io(_) | Error::Decomposition(_) => DAGODE_ERR_DATA,
        Error::Numeric(_) | Error::Optimization { .. } => DAGODE_ERR_NUMERIC,
    }
}

fn fail(e: &Error) -> c_int {
    set_error(&e.to_string());
    code_for(e)
}

/// Message describing the most recent error on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dagode_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Toolkit version as a static string.
#[no_mangle]
pub extern "C" fn dagode_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque dataset handle.
pub struct DagodeDataset(Dataset);

/// Opaque fit-result handle.
pub struct DagodeFit(FitResult);

/// Load a CSV dataset (header row of names, numeric body). Returns null on
/// failure; see dagode_last_error_message.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dagode_dataset_load_csv(path: *const c_char) -> *mut DagodeDataset {
    if path.is_null() {
        set_error("path is null");
        return ptr::null_mut();
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("path is not valid UTF-8");
            return ptr::null_mut();
        }
    };
    match load_dataset(Path::new(path)) {
        Ok(ds) => Box::into_raw(Box::new(DagodeDataset(ds))),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `ds` must be a pointer returned by dagode_dataset_load_csv (or null).
#[no_mangle]
pub unsafe extern "C" fn dagode_dataset_free(ds: *mut DagodeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dagode_dataset_rows(ds: *const DagodeDataset) -> c_int {
    if ds.is_null() {
        return -1;
    }
    (*ds).0.n() as c_int
}

/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dagode_dataset_cols(ds: *const DagodeDataset) -> c_int {
    if ds.is_null() {
        return -1;
    }
    (*ds).0.d() as c_int
}

/// Acyclicity functional h(W) = Tr(exp(W o W)) - d for a row-major d x d
/// matrix. h is zero iff the support of W is acyclic.
///
/// # Safety
/// `w` must point to d*d doubles; `h_out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dagode_h_exp(
    w: *const c_double,
    d: c_int,
    h_out: *mut c_double,
) -> c_int {
    if w.is_null() || h_out.is_null() || d < 1 {
        set_error("dagode_h_exp: null pointer or d < 1");
        return DAGODE_ERR_ARGUMENT;
    }
    let d = d as usize;
    let data = std::slice::from_raw_parts(w, d * d).to_vec();
    let m = Matrix::from_vec(d, d, data);
    match acyclicity::h_exp(&m) {
        Ok(c) => {
            *h_out = c.h;
            DAGODE_OK
        }
        Err(e) => fail(&e),
    }
}

unsafe fn fit_common(
    ds: *const DagodeDataset,
    mut cfg: LearnerConfig,
    threshold: c_double,
    seed: u64,
    dag_ode: bool,
) -> *mut DagodeFit {
    if ds.is_null() {
        set_error("dataset handle is null");
        return ptr::null_mut();
    }
    cfg.seed = seed;
    if threshold >= 0.0 {
        cfg.threshold = ThresholdRule::Fixed(threshold);
    }
    let data = &(*ds).0;
    let r = if dag_ode { fit_dag_ode(data, &cfg) } else { fit_notears_linear(data, &cfg) };
    match r {
        Ok(fit) => Box::into_raw(Box::new(DagodeFit(fit))),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// Fit the linear NOTEARS learner with default hyperparameters, the given
/// l1 weight, and edge threshold (pass a negative threshold for the
/// default). Returns null on failure.
///
/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dagode_fit_notears(
    ds: *const DagodeDataset,
    lambda1: c_double,
    threshold: c_double,
    seed: u64,
) -> *mut DagodeFit {
    let mut cfg = LearnerConfig::notears();
    cfg.lambda1 = lambda1;
    fit_common(ds, cfg, threshold, seed, false)
}

/// Fit the DAG-ODE/CNF learner with default hyperparameters. Pass a
/// negative threshold to keep the largest-gap rule.
///
/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dagode_fit_dag_ode(
    ds: *const DagodeDataset,
    lambda1: c_double,
    threshold: c_double,
    seed: u64,
) -> *mut DagodeFit {
    let mut cfg = LearnerConfig::dag_ode();
    cfg.lambda1 = lambda1;
    fit_common(ds, cfg, threshold, seed, true)
}

/// # Safety
/// `fit` must be a pointer returned by a dagode_fit_* call (or null).
#[no_mangle]
pub unsafe extern "C" fn dagode_fit_free(fit: *mut DagodeFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Number of edges in the thresholded DAG, or -1 on a null handle.
///
/// # Safety
/// `fit` must be a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn dagode_fit_edge_count(fit: *const DagodeFit) -> c_int {
    if fit.is_null() {
        return -1;
    }
    (*fit).0.dag.edge_count() as c_int
}

/// Parent/child node indices of edge `i` (in sorted order).
///
/// # Safety
/// `fit`, `parent`, and `child` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dagode_fit_edge(
    fit: *const DagodeFit,
    i: c_int,
    parent: *mut c_int,
    child: *mut c_int,
) -> c_int {
    if fit.is_null() || parent.is_null() || child.is_null() || i < 0 {
        set_error("dagode_fit_edge: null pointer or negative index");
        return DAGODE_ERR_ARGUMENT;
    }
    match (*fit).0.dag.edges().iter().nth(i as usize) {
        Some(&(p, c)) => {
            *parent = p as c_int;
            *child = c as c_int;
            DAGODE_OK
        }
        None => {
            set_error("edge index out of range");
            DAGODE_ERR_ARGUMENT
        }
    }
}

/// Entry [j,k] of the effective adjacency (|W| or J-bar), or NaN on error.
///
/// # Safety
/// `fit` must be a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn dagode_fit_weight(fit: *const DagodeFit, j: c_int, k: c_int) -> c_double {
    if fit.is_null() || j < 0 || k < 0 {
        return f64::NAN;
    }
    let w = &(*fit).0.w_or_jbar;
    if j as usize >= w.rows() || k as usize >= w.cols() {
        return f64::NAN;
    }
    w.get(j as usize, k as usize)
}

/// Final constraint residual of the fit.
///
/// # Safety
/// `fit` must be a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn dagode_fit_h_final(fit: *const DagodeFit) -> c_double {
    if fit.is_null() {
        return f64::NAN;
    }
    (*fit).0.h_final
}

/// 1 if the augmented-Lagrangian loop reported convergence, 0 if not,
/// -1 on a null handle.
///
/// # Safety
/// `fit` must be a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn dagode_fit_converged(fit: *const DagodeFit) -> c_int {
    if fit.is_null() {
        return -1;
    }
    (*fit).0.converged as c_int
}

/// SHD and TPR between two edge sets over `d` nodes, each given as a
/// length-2m array of (parent, child) pairs.
///
/// # Safety
/// `pred`/`truth` must point to 2*pred_m / 2*truth_m ints; `shd_out` and
/// `tpr_out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dagode_shd(
    d: c_int,
    pred: *const c_int,
    pred_m: c_int,
    truth: *const c_int,
    truth_m: c_int,
    shd_out: *mut c_int,
    tpr_out: *mut c_double,
) -> c_int {
    if d < 1 || pred_m < 0 || truth_m < 0 || shd_out.is_null() || tpr_out.is_null()
        || (pred.is_null() && pred_m > 0)
        || (truth.is_null() && truth_m > 0)
    {
        set_error("dagode_shd: bad arguments");
        return DAGODE_ERR_ARGUMENT;
    }
    let to_edges = |p: *const c_int, m: c_int| -> Vec<(usize, usize)> {
        if m == 0 {
            return Vec::new();
        }
        std::slice::from_raw_parts(p, 2 * m as usize)
            .chunks_exact(2)
            .map(|e| (e[0] as usize, e[1] as usize))
            .collect()
    };
    let build = |edges: Vec<(usize, usize)>| graphs::Dag::new(d as usize, edges);
    let pred_dag = match build(to_edges(pred, pred_m)) {
        Ok(g) => g,
        Err(e) => return fail(&e),
    };
    let truth_dag = match build(to_edges(truth, truth_m)) {
        Ok(g) => g,
        Err(e) => return fail(&e),
    };
    match graphs::shd(&pred_dag, &truth_dag) {
        Ok(m) => {
            *shd_out = m.shd as c_int;
            *tpr_out = m.tpr;
            DAGODE_OK
        }
        Err(e) => fail(&e),
    }
}
