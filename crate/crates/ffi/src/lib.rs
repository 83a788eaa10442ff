//! C ABI over the rareflow library.
//!
//! Every fallible function returns an [`RfStatus`]; on failure the message
//! is available from [`rf_last_error`] on the same thread. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Panics never unwind into the caller; they surface as
//! `RF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rareflow::estimator::{required_n, Accumulator, PlannerInput};
use rareflow::flow::Flow;
use rareflow::gmm::Gmm;
use rareflow::sim::{idm_accel, IdmParams};
use rareflow::{risk, Error, Scene};

/// Result of a call. Codes 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    DataError = 3,
    NumericalError = 4,
    Panic = 5,
}

impl From<&Error> for RfStatus {
    fn from(e: &Error) -> Self {
        match e.exit_code() {
            2 => RfStatus::InvalidInput,
            3 => RfStatus::DataError,
            _ => RfStatus::NumericalError,
        }
    }
}

/// Mixture density handle.
pub struct RfGmm(Gmm);

/// Normalizing flow handle.
pub struct RfFlow(Flow);

/// Streaming estimator handle.
pub struct RfAccumulator(Accumulator);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfScene {
    pub v_av: f64,
    pub v_lead: f64,
    pub gap: f64,
    pub a_lead: f64,
}

impl From<RfScene> for Scene {
    fn from(s: RfScene) -> Self {
        Scene::new(s.v_av, s.v_lead, s.gap, s.a_lead)
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfIdmParams {
    pub v0: f64,
    pub t_headway: f64,
    pub a_max: f64,
    pub b_comf: f64,
    pub s0: f64,
    pub delta: f64,
    /// Use `INFINITY` to remove the braking cap.
    pub b_max: f64,
}

impl From<RfIdmParams> for IdmParams {
    fn from(p: RfIdmParams) -> Self {
        IdmParams {
            v0: p.v0,
            t_headway: p.t_headway,
            a_max: p.a_max,
            b_comf: p.b_comf,
            s0: p.s0,
            delta: p.delta,
            b_max: p.b_max,
        }
    }
}

/// Snapshot of an accumulator. Undefined quantities are `INFINITY`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RfSummary {
    pub n: u64,
    pub hits: u64,
    pub estimate: f64,
    pub variance: f64,
    pub std_error: f64,
    pub omega: f64,
    pub ess: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: RfStatus, msg: impl Into<String>) -> RfStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), RfStatus>>(f: F) -> RfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RfStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(RfStatus::Panic, "internal panic"),
    }
}

fn check(r: rareflow::Result<()>) -> Result<(), RfStatus> {
    r.map_err(|e| fail(RfStatus::from(&e), e.to_string()))
}

fn lift<T>(r: rareflow::Result<T>) -> Result<T, RfStatus> {
    r.map_err(|e| fail(RfStatus::from(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), RfStatus> {
    if p.is_null() {
        Err(fail(RfStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, RfStatus> {
    non_null(path, "path")?;
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(RfStatus::InvalidInput, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(data: *const f64, len: usize, what: &str) -> Result<&'a [f64], RfStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(data, what)?;
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn slice_out<'a>(data: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], RfStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(data, what)?;
    Ok(std::slice::from_raw_parts_mut(data, len))
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- mixture densities ----

/// Builds a `k`-component mixture over `dim` variables from row-major
/// `means` (`k·dim`) and `covariances` (`k·dim·dim`).
///
/// # Safety
/// Array arguments must hold the stated number of elements and `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_gmm_new(
    k: usize,
    dim: usize,
    weights: *const f64,
    means: *const f64,
    covariances: *const f64,
    out: *mut *mut RfGmm,
) -> RfStatus {
    guard(|| {
        non_null(out, "out")?;
        if k == 0 || dim == 0 {
            return Err(fail(RfStatus::InvalidInput, "k and dim must be positive"));
        }
        let w = slice_arg(weights, k, "weights")?;
        let m = slice_arg(means, k * dim, "means")?;
        let c = slice_arg(covariances, k * dim * dim, "covariances")?;
        let gmm = lift(Gmm::new(
            w.to_vec(),
            m.chunks(dim).map(<[f64]>::to_vec).collect(),
            c.chunks(dim * dim).map(<[f64]>::to_vec).collect(),
        ))?;
        *out = Box::into_raw(Box::new(RfGmm(gmm)));
        Ok(())
    })
}

/// Loads a mixture saved by the `fit` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_gmm_load(path: *const c_char, out: *mut *mut RfGmm) -> RfStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = path_arg(path)?;
        if !p.exists() {
            return Err(fail(RfStatus::DataError, format!("file not found: {}", p.display())));
        }
        let gmm = lift(Gmm::load(&p))?;
        *out = Box::into_raw(Box::new(RfGmm(gmm)));
        Ok(())
    })
}

/// Dimension of the mixture, or 0 for a null handle.
///
/// # Safety
/// `gmm` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rf_gmm_dim(gmm: *const RfGmm) -> usize {
    gmm.as_ref().map_or(0, |g| g.0.dim())
}

/// # Safety
/// `gmm` must be a live handle, `x` must hold `len` values and `out` be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn rf_gmm_log_pdf(gmm: *const RfGmm, x: *const f64, len: usize, out: *mut f64) -> RfStatus {
    guard(|| {
        non_null(gmm, "gmm")?;
        non_null(out, "out")?;
        let x = slice_arg(x, len, "x")?;
        *out = lift((*gmm).0.log_pdf(x))?;
        Ok(())
    })
}

/// Writes `n` draws, row-major, into `out` (`n·dim` values).
///
/// # Safety
/// `gmm` must be a live handle and `out` hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn rf_gmm_sample(gmm: *const RfGmm, seed: u64, n: usize, out: *mut f64, out_len: usize) -> RfStatus {
    guard(|| {
        non_null(gmm, "gmm")?;
        let g = &(*gmm).0;
        if out_len != n * g.dim() {
            return Err(fail(RfStatus::InvalidInput, format!("out needs {} values", n * g.dim())));
        }
        let buf = slice_out(out, out_len, "out")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for row in buf.chunks_mut(g.dim()) {
            row.copy_from_slice(&g.sample(&mut rng));
        }
        Ok(())
    })
}

/// # Safety
/// `gmm` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rf_gmm_free(gmm: *mut RfGmm) {
    if !gmm.is_null() {
        drop(Box::from_raw(gmm));
    }
}

// ---- flows ----

/// Loads a flow saved by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_flow_load(path: *const c_char, out: *mut *mut RfFlow) -> RfStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = path_arg(path)?;
        let flow = lift(Flow::load(&p))?;
        *out = Box::into_raw(Box::new(RfFlow(flow)));
        Ok(())
    })
}

/// # Safety
/// `flow` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rf_flow_dim(flow: *const RfFlow) -> usize {
    flow.as_ref().map_or(0, |f| f.0.dim())
}

/// # Safety
/// `flow` must be a live handle, `x` hold `len` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_flow_log_pdf(flow: *const RfFlow, x: *const f64, len: usize, out: *mut f64) -> RfStatus {
    guard(|| {
        non_null(flow, "flow")?;
        non_null(out, "out")?;
        let x = slice_arg(x, len, "x")?;
        *out = lift((*flow).0.log_pdf(x))?;
        Ok(())
    })
}

/// Maps data `x` to latent `z`; `log_det` receives `ln |det ∂z/∂x|`.
///
/// # Safety
/// `x` and `z` must hold `len` values; `log_det` may be null.
#[no_mangle]
pub unsafe extern "C" fn rf_flow_forward(
    flow: *const RfFlow,
    x: *const f64,
    z: *mut f64,
    len: usize,
    log_det: *mut f64,
) -> RfStatus {
    guard(|| {
        non_null(flow, "flow")?;
        let input = slice_arg(x, len, "x")?;
        let (y, ld) = lift((*flow).0.forward(input))?;
        slice_out(z, len, "z")?.copy_from_slice(&y);
        if !log_det.is_null() {
            *log_det = ld;
        }
        Ok(())
    })
}

/// Maps latent `z` back to data `x`.
///
/// # Safety
/// `z` and `x` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn rf_flow_inverse(flow: *const RfFlow, z: *const f64, x: *mut f64, len: usize) -> RfStatus {
    guard(|| {
        non_null(flow, "flow")?;
        let input = slice_arg(z, len, "z")?;
        let back = lift((*flow).0.inverse(input))?;
        slice_out(x, len, "x")?.copy_from_slice(&back);
        Ok(())
    })
}

/// # Safety
/// `flow` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rf_flow_free(flow: *mut RfFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

// ---- estimation ----

#[no_mangle]
pub extern "C" fn rf_accumulator_new() -> *mut RfAccumulator {
    Box::into_raw(Box::new(RfAccumulator(Accumulator::new())))
}

/// Adds one scenario with likelihood ratio `weight` and collision flag
/// `hit` (non-zero for a collision).
///
/// # Safety
/// `acc` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rf_accumulator_push(acc: *mut RfAccumulator, weight: f64, hit: i32) -> RfStatus {
    guard(|| {
        non_null(acc, "acc")?;
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(fail(RfStatus::NumericalError, format!("weight {weight} is not a finite non-negative number")));
        }
        (*acc).0.push(weight, hit != 0);
        Ok(())
    })
}

/// As [`rf_accumulator_push`] with the ratio given in log space.
///
/// # Safety
/// `acc` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rf_accumulator_push_log(acc: *mut RfAccumulator, log_ratio: f64, hit: i32) -> RfStatus {
    guard(|| {
        non_null(acc, "acc")?;
        let a = &mut (*acc).0;
        let w = lift(rareflow::estimator::weight_from_log(log_ratio, a.n as usize))?;
        a.push(w, hit != 0);
        Ok(())
    })
}

/// Folds `src` into `dst`; `src` is left unchanged.
///
/// # Safety
/// Both must be live handles.
#[no_mangle]
pub unsafe extern "C" fn rf_accumulator_merge(dst: *mut RfAccumulator, src: *const RfAccumulator) -> RfStatus {
    guard(|| {
        non_null(dst, "dst")?;
        non_null(src, "src")?;
        if ptr::eq(dst, src) {
            let copy = (*src).0;
            (*dst).0.merge(&copy);
        } else {
            (*dst).0.merge(&(*src).0);
        }
        Ok(())
    })
}

/// Fills `out` for a `1 − beta` confidence level.
///
/// # Safety
/// `acc` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_accumulator_summary(acc: *const RfAccumulator, beta: f64, out: *mut RfSummary) -> RfStatus {
    guard(|| {
        non_null(acc, "acc")?;
        non_null(out, "out")?;
        if !(beta > 0.0 && beta < 1.0) {
            return Err(fail(RfStatus::InvalidInput, "beta must lie in (0, 1)"));
        }
        let a = &(*acc).0;
        let variance = a.variance();
        *out = RfSummary {
            n: a.n,
            hits: a.hits,
            estimate: a.estimate(),
            variance,
            std_error: variance.sqrt(),
            omega: a.omega(beta),
            ess: a.effective_sample_size(),
        };
        Ok(())
    })
}

/// # Safety
/// `acc` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rf_accumulator_free(acc: *mut RfAccumulator) {
    if !acc.is_null() {
        drop(Box::from_raw(acc));
    }
}

// ---- plain functions ----

/// Crude Monte Carlo rollouts needed to reach relative half-width `b` at
/// confidence `1 − beta` for a rate `p`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_required_n(p: f64, b: f64, beta: f64, out: *mut u64) -> RfStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = lift(required_n(&PlannerInput { p, b, beta }))?;
        Ok(())
    })
}

/// Constant-velocity time to collision; `INFINITY` when not closing.
#[no_mangle]
pub extern "C" fn rf_ttc(scene: RfScene) -> f64 {
    risk::ttc(&scene.into())
}

/// `exp(−ttc)`.
#[no_mangle]
pub extern "C" fn rf_risk_weight(scene: RfScene) -> f64 {
    risk::risk_weight(&scene.into())
}

#[no_mangle]
pub extern "C" fn rf_idm_default() -> RfIdmParams {
    let p = IdmParams::default();
    RfIdmParams {
        v0: p.v0,
        t_headway: p.t_headway,
        a_max: p.a_max,
        b_comf: p.b_comf,
        s0: p.s0,
        delta: p.delta,
        b_max: p.b_max,
    }
}

/// IDM follower acceleration, capped below at `-b_max`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_idm_accel(scene: RfScene, params: RfIdmParams, out: *mut f64) -> RfStatus {
    guard(|| {
        non_null(out, "out")?;
        let p: IdmParams = params.into();
        check(p.validate())?;
        *out = lift(idm_accel(&scene.into(), &p))?;
        Ok(())
    })
}
