//! C ABI for `spsa-lab`.
//!
//! Objects are opaque heap handles created by `spsa_*_new` style functions and
//! released by the matching `spsa_*_free`. Every fallible function returns a
//! [`SpsaStatus`]; on failure a message is kept per thread and can be read
//! with [`spsa_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;
use std::sync::Arc;

use nalgebra::DMatrix;
use spsa_lab::exploration::{BaseLaw, BaseNoise, ProbeGenerator, ProbeMode};
use spsa_lab::meanflow::{find_equilibrium, FbarMethod, MeanFieldEvaluator};
use spsa_lab::objectives::{Builtin, FnObjective, Objective};
use spsa_lab::schedules::{ExplorationGain, StepSizeSchedule};
use spsa_lab::spsa::{step_1spsa, step_2spsa, DivergenceGuard, OptimizerState};
use spsa_lab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpsaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    NonFinite = 5,
    Diverged = 6,
    NotConverged = 7,
    FloorViolated = 8,
    Internal = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpsaBuiltin {
    Quadratic1d = 0,
    TrigQuadratic1d = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpsaAlgorithm {
    OneMeasurement = 0,
    TwoMeasurement = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpsaGainKind {
    Constant = 0,
    Decaying = 1,
    CenterActive = 2,
    ObjectiveActive = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpsaBaseLaw {
    Rademacher = 0,
    Uniform = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpsaProbeMode {
    Iid = 0,
    ZigZag = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpsaFbarMethod {
    TwoPointExact = 0,
    GaussQuadrature = 1,
    MonteCarlo = 2,
}

/// Algorithm, schedules and probe law. Start from [`spsa_settings_default`].
///
/// `theta_ctr` may be null (the origin); otherwise it points at `dim`
/// doubles that must stay valid while the settings are passed to a
/// constructor. Fields not used by the selected gain are ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpsaSettings {
    pub algorithm: SpsaAlgorithm,
    pub alpha0: f64,
    pub rho: f64,
    pub gain: SpsaGainKind,
    pub eps_bullet: f64,
    pub kappa: f64,
    pub theta_ctr: *const f64,
    pub sigma_p: f64,
    pub obj_floor: f64,
    pub base: SpsaBaseLaw,
    pub support: f64,
    pub mode: SpsaProbeMode,
    pub varsigma: f64,
    pub seed: u64,
}

/// Objective evaluated by C code. Must be safe to call from any thread.
pub type SpsaObjectiveFn = Option<unsafe extern "C" fn(theta: *const f64, dim: usize, user_data: *mut c_void) -> f64>;

pub struct SpsaObjective {
    inner: Arc<dyn Objective>,
}

pub struct SpsaOptimizer {
    objective: Arc<dyn Objective>,
    algorithm: SpsaAlgorithm,
    step: StepSizeSchedule,
    gain: ExplorationGain,
    state: OptimizerState,
}

pub struct SpsaMeanField {
    inner: MeanFieldEvaluator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SpsaStatus {
    match err {
        Error::Config { .. } => SpsaStatus::Config,
        Error::InvalidArgument(_) | Error::Io(_) | Error::Serialize(_) => SpsaStatus::InvalidArgument,
        Error::Dimension { .. } => SpsaStatus::Dimension,
        Error::FloorViolated { .. } => SpsaStatus::FloorViolated,
        Error::NonFinite { .. } => SpsaStatus::NonFinite,
        Error::NotConverged { .. } => SpsaStatus::NotConverged,
        Error::Diverged(_) => SpsaStatus::Diverged,
    }
}

struct Fail(SpsaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SpsaStatus::NullPointer, format!("`{what}` is null"))
}

fn guarded(f: impl FnOnce() -> Result<(), Fail>) -> SpsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpsaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            SpsaStatus::Internal
        }
    }
}

unsafe fn slice_in<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn expect_dim(expected: usize, got: usize) -> Result<(), Fail> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got }.into())
    }
}

unsafe fn write_handle<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spsa_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Copy the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`). Returns the full message length
/// excluding the terminator, or 0 if there is no error.
///
/// # Safety
/// `buf` must be null or point at `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn spsa_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

#[no_mangle]
pub extern "C" fn spsa_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Active gain, Rademacher i.i.d. probes, `alpha_n = min(1, n^-0.6)`,
/// `eps_bullet = 0.1`, zig-zag factor `1/sqrt(2)` when selected.
#[no_mangle]
pub extern "C" fn spsa_settings_default() -> SpsaSettings {
    SpsaSettings {
        algorithm: SpsaAlgorithm::OneMeasurement,
        alpha0: 1.0,
        rho: 0.6,
        gain: SpsaGainKind::CenterActive,
        eps_bullet: 0.1,
        kappa: 0.3,
        theta_ctr: ptr::null(),
        sigma_p: 1.0,
        obj_floor: 0.0,
        base: SpsaBaseLaw::Rademacher,
        support: 1.0,
        mode: SpsaProbeMode::Iid,
        varsigma: std::f64::consts::FRAC_1_SQRT_2,
        seed: 0,
    }
}

/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn spsa_objective_builtin(kind: SpsaBuiltin, out: *mut *mut SpsaObjective) -> SpsaStatus {
    guarded(|| {
        let inner: Arc<dyn Objective> = match kind {
            SpsaBuiltin::Quadratic1d => Arc::new(Builtin::Quadratic1D),
            SpsaBuiltin::TrigQuadratic1d => Arc::new(Builtin::TrigQuadratic1D),
        };
        write_handle(out, SpsaObjective { inner })
    })
}

/// `theta' Q theta / 2` with `Q` given row-major as `dim * dim` doubles.
///
/// # Safety
/// `q` must point at `dim * dim` doubles; `out` at a handle slot.
#[no_mangle]
pub unsafe extern "C" fn spsa_objective_quadratic(
    q: *const f64,
    dim: usize,
    out: *mut *mut SpsaObjective,
) -> SpsaStatus {
    guarded(|| {
        let entries = slice_in(q, dim * dim, "q")?;
        let q = DMatrix::from_row_slice(dim, dim, entries);
        write_handle(out, SpsaObjective { inner: Arc::new(Builtin::quadratic_nd(q)?) })
    })
}

/// Wrap a C callback. `user_data` is passed through untouched and must
/// outlive every handle built from this objective.
///
/// # Safety
/// `eval` must be callable from any thread with `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn spsa_objective_callback(
    eval: SpsaObjectiveFn,
    user_data: *mut c_void,
    dim: usize,
    out: *mut *mut SpsaObjective,
) -> SpsaStatus {
    guarded(|| {
        let Some(eval) = eval else { return Err(null("eval")) };
        if dim == 0 {
            return Err(Fail(SpsaStatus::InvalidArgument, "dimension must be positive".into()));
        }
        let data = user_data as usize;
        let inner =
            FnObjective::new(dim, move |theta| unsafe { eval(theta.as_ptr(), theta.len(), data as *mut c_void) });
        write_handle(out, SpsaObjective { inner: Arc::new(inner) })
    })
}

/// # Safety
/// `obj` must be null or a live objective handle.
#[no_mangle]
pub unsafe extern "C" fn spsa_objective_dim(obj: *const SpsaObjective) -> usize {
    obj.as_ref().map_or(0, |o| o.inner.dim())
}

/// # Safety
/// `theta` must point at `dim` doubles and `value` at one.
#[no_mangle]
pub unsafe extern "C" fn spsa_objective_eval(
    obj: *const SpsaObjective,
    theta: *const f64,
    dim: usize,
    value: *mut f64,
) -> SpsaStatus {
    guarded(|| {
        let obj = handle(obj, "obj")?;
        expect_dim(obj.inner.dim(), dim)?;
        let theta = slice_in(theta, dim, "theta")?;
        let v = spsa_lab::objectives::eval(obj.inner.as_ref(), theta)?;
        *handle_mut(value, "value")? = v;
        Ok(())
    })
}

/// # Safety
/// `obj` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn spsa_objective_free(obj: *mut SpsaObjective) {
    if !obj.is_null() {
        drop(Box::from_raw(obj));
    }
}

struct Parts {
    step: StepSizeSchedule,
    gain: ExplorationGain,
    law: BaseLaw,
    mode: ProbeMode,
}

unsafe fn parts(settings: &SpsaSettings, obj: &Arc<dyn Objective>) -> Result<Parts, Fail> {
    let d = obj.dim();
    let step = StepSizeSchedule::new(settings.alpha0, settings.rho)?;
    let gain = match settings.gain {
        SpsaGainKind::Constant => ExplorationGain::constant(settings.eps_bullet)?,
        SpsaGainKind::Decaying => ExplorationGain::decaying(settings.eps_bullet, settings.kappa)?,
        SpsaGainKind::CenterActive => {
            let ctr = if settings.theta_ctr.is_null() {
                vec![0.0; d]
            } else {
                slice::from_raw_parts(settings.theta_ctr, d).to_vec()
            };
            ExplorationGain::center_active(settings.eps_bullet, ctr, settings.sigma_p)?
        }
        SpsaGainKind::ObjectiveActive => {
            ExplorationGain::objective_active(settings.eps_bullet, settings.obj_floor, obj.clone())?
        }
    };
    let law = match settings.base {
        SpsaBaseLaw::Rademacher => BaseLaw::Rademacher,
        SpsaBaseLaw::Uniform => BaseNoise::uniform(settings.support, d, 0)?.law,
    };
    let mode = match settings.mode {
        SpsaProbeMode::Iid => ProbeMode::Iid,
        SpsaProbeMode::ZigZag => ProbeMode::ZigZag { varsigma: settings.varsigma },
    };
    Ok(Parts { step, gain, law, mode })
}

/// Create an optimizer at `theta0`. The objective handle may be freed
/// afterwards; the optimizer keeps its own reference.
///
/// # Safety
/// `settings` must point at valid settings, `theta0` at `dim` doubles and
/// `out` at a handle slot.
#[no_mangle]
pub unsafe extern "C" fn spsa_optimizer_new(
    obj: *const SpsaObjective,
    settings: *const SpsaSettings,
    theta0: *const f64,
    dim: usize,
    out: *mut *mut SpsaOptimizer,
) -> SpsaStatus {
    guarded(|| {
        let objective = handle(obj, "obj")?.inner.clone();
        let settings = handle(settings, "settings")?;
        expect_dim(objective.dim(), dim)?;
        let theta0 = slice_in(theta0, dim, "theta0")?.to_vec();
        let p = parts(settings, &objective)?;
        let probe = ProbeGenerator::new(BaseNoise::new(p.law, dim, settings.seed)?, p.mode)?;
        let state = OptimizerState::new(theta0, probe)?;
        write_handle(out, SpsaOptimizer { objective, algorithm: settings.algorithm, step: p.step, gain: p.gain, state })
    })
}

fn advance(opt: &mut SpsaOptimizer) -> Result<(), Fail> {
    let obj = opt.objective.as_ref();
    match opt.algorithm {
        SpsaAlgorithm::OneMeasurement => step_1spsa(&mut opt.state, obj, &opt.step, &opt.gain)?,
        SpsaAlgorithm::TwoMeasurement => step_2spsa(&mut opt.state, obj, &opt.step, &opt.gain)?,
    };
    Ok(())
}

/// Take `steps` iterations, or stop early with `SpsaStatus::Diverged` once
/// `|theta_n|` exceeds `guard_threshold` (at least 1e3). The iteration at
/// which the guard fired is the optimizer's current iteration.
///
/// # Safety
/// `opt` must be a live optimizer handle.
#[no_mangle]
pub unsafe extern "C" fn spsa_optimizer_run(opt: *mut SpsaOptimizer, steps: u64, guard_threshold: f64) -> SpsaStatus {
    guarded(|| {
        let opt = handle_mut(opt, "opt")?;
        let guard = DivergenceGuard::new(guard_threshold)?;
        for _ in 0..steps {
            let stepped = advance(opt);
            if let Err(Fail(SpsaStatus::NonFinite, _)) = stepped {
                return Err(Error::Diverged(opt.state.n).into());
            }
            stepped?;
            if guard.tripped(&opt.state.theta) {
                return Err(Error::Diverged(opt.state.n).into());
            }
        }
        Ok(())
    })
}

/// # Safety
/// `opt` must be a live optimizer handle and `theta` point at `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn spsa_optimizer_theta(opt: *const SpsaOptimizer, theta: *mut f64, dim: usize) -> SpsaStatus {
    guarded(|| {
        let opt = handle(opt, "opt")?;
        expect_dim(opt.state.theta.len(), dim)?;
        slice_out(theta, dim, "theta")?.copy_from_slice(&opt.state.theta);
        Ok(())
    })
}

/// Iteration count `n`; 0 for a null handle.
///
/// # Safety
/// `opt` must be null or a live optimizer handle.
#[no_mangle]
pub unsafe extern "C" fn spsa_optimizer_iteration(opt: *const SpsaOptimizer) -> u64 {
    opt.as_ref().map_or(0, |o| o.state.n)
}

/// Exploration gain used by the most recent step (NaN before the first).
///
/// # Safety
/// `opt` must be null or a live optimizer handle.
#[no_mangle]
pub unsafe extern "C" fn spsa_optimizer_last_gain(opt: *const SpsaOptimizer) -> f64 {
    opt.as_ref().map_or(f64::NAN, |o| o.state.last_gain)
}

/// # Safety
/// `opt` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn spsa_optimizer_free(opt: *mut SpsaOptimizer) {
    if !opt.is_null() {
        drop(Box::from_raw(opt));
    }
}

/// Mean-field evaluator for the 1SPSA direction. `samples` and the settings
/// seed are used by the Monte-Carlo method only.
///
/// # Safety
/// `obj`, `settings` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spsa_meanfield_new(
    obj: *const SpsaObjective,
    settings: *const SpsaSettings,
    method: SpsaFbarMethod,
    samples: usize,
    out: *mut *mut SpsaMeanField,
) -> SpsaStatus {
    guarded(|| {
        let objective = handle(obj, "obj")?.inner.clone();
        let settings = handle(settings, "settings")?;
        let p = parts(settings, &objective)?;
        let method = match method {
            SpsaFbarMethod::TwoPointExact => FbarMethod::TwoPointExact,
            SpsaFbarMethod::GaussQuadrature => FbarMethod::GaussQuadrature,
            SpsaFbarMethod::MonteCarlo => FbarMethod::MonteCarlo,
        };
        let mut inner = MeanFieldEvaluator::new(objective, p.gain, p.law, p.mode, method)?;
        if method == FbarMethod::MonteCarlo {
            inner = inner.with_monte_carlo(samples, settings.seed);
        }
        write_handle(out, SpsaMeanField { inner })
    })
}

/// `fbar(theta)` into `value`; the Monte-Carlo standard error goes into
/// `stderr_out` when it is not null (zeros for deterministic methods).
///
/// # Safety
/// `theta`, `value` and a non-null `stderr_out` must each hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn spsa_meanfield_fbar(
    mf: *const SpsaMeanField,
    theta: *const f64,
    dim: usize,
    value: *mut f64,
    stderr_out: *mut f64,
) -> SpsaStatus {
    guarded(|| {
        let mf = handle(mf, "mf")?;
        expect_dim(mf.inner.dim(), dim)?;
        let est = mf.inner.fbar(slice_in(theta, dim, "theta")?)?;
        slice_out(value, dim, "value")?.copy_from_slice(&est.value);
        if !stderr_out.is_null() {
            slice_out(stderr_out, dim, "stderr_out")?.copy_from_slice(&est.stderr);
        }
        Ok(())
    })
}

/// Solve `fbar(theta*) = 0` from `theta_init` with tolerance `tol` in
/// `[1e-12, 1e-6]`. Writes `theta*` and the real parts of the Jacobian's
/// eigenvalues (`dim` doubles each).
///
/// # Safety
/// `theta_init`, `theta_star` and `eig_real` must each hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn spsa_meanfield_equilibrium(
    mf: *const SpsaMeanField,
    theta_init: *const f64,
    dim: usize,
    tol: f64,
    theta_star: *mut f64,
    eig_real: *mut f64,
) -> SpsaStatus {
    guarded(|| {
        let mf = handle(mf, "mf")?;
        expect_dim(mf.inner.dim(), dim)?;
        let report = find_equilibrium(&mf.inner, slice_in(theta_init, dim, "theta_init")?, tol)?;
        slice_out(theta_star, dim, "theta_star")?.copy_from_slice(&report.theta_star);
        slice_out(eig_real, dim, "eig_real")?.copy_from_slice(&report.eigen_real_parts);
        Ok(())
    })
}

/// # Safety
/// `mf` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn spsa_meanfield_free(mf: *mut SpsaMeanField) {
    if !mf.is_null() {
        drop(Box::from_raw(mf));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let mut buf = vec![0 as c_char; 256];
        let n = unsafe { spsa_last_error(buf.as_mut_ptr(), buf.len()) };
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
        assert_eq!(n.min(255), msg.len());
        msg
    }

    #[test]
    fn version_matches_crate() {
        let v = unsafe { CStr::from_ptr(spsa_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn null_out_pointer_is_reported() {
        let status = unsafe { spsa_objective_builtin(SpsaBuiltin::Quadratic1d, ptr::null_mut()) };
        assert_eq!(status, SpsaStatus::NullPointer);
        assert!(last_error().contains("out"));
        spsa_clear_error();
        assert_eq!(last_error(), "");
    }

    #[test]
    fn bad_rho_names_the_key() {
        let mut obj = ptr::null_mut();
        unsafe { assert_eq!(spsa_objective_builtin(SpsaBuiltin::Quadratic1d, &mut obj), SpsaStatus::Ok) };
        let settings = SpsaSettings { rho: 1.2, ..spsa_settings_default() };
        let mut opt = ptr::null_mut();
        let status = unsafe { spsa_optimizer_new(obj, &settings, [1.0].as_ptr(), 1, &mut opt) };
        assert_eq!(status, SpsaStatus::Config);
        assert!(opt.is_null());
        assert!(last_error().contains("step.rho"));
        unsafe { spsa_objective_free(obj) };
    }

    #[test]
    fn optimizer_matches_one_step_example() {
        // theta_0 = 0, eps = 0.1, alpha_1 = 1: the update is -alpha eps xi^3 = -0.1 xi.
        let mut obj = ptr::null_mut();
        unsafe { spsa_objective_builtin(SpsaBuiltin::Quadratic1d, &mut obj) };
        let settings = SpsaSettings { gain: SpsaGainKind::Constant, seed: 4, ..spsa_settings_default() };
        let mut opt = ptr::null_mut();
        unsafe {
            assert_eq!(spsa_optimizer_new(obj, &settings, [0.0].as_ptr(), 1, &mut opt), SpsaStatus::Ok);
            spsa_objective_free(obj);
            assert_eq!(spsa_optimizer_run(opt, 1, 1e6), SpsaStatus::Ok);
            let mut theta = [f64::NAN];
            assert_eq!(spsa_optimizer_theta(opt, theta.as_mut_ptr(), 1), SpsaStatus::Ok);
            assert!((theta[0].abs() - 0.1).abs() < 1e-15);
            assert_eq!(spsa_optimizer_iteration(opt), 1);
            assert_eq!(spsa_optimizer_last_gain(opt), 0.1);
            spsa_optimizer_free(opt);
        }
    }

    #[test]
    fn constant_gain_trips_guard() {
        let mut obj = ptr::null_mut();
        unsafe { spsa_objective_builtin(SpsaBuiltin::Quadratic1d, &mut obj) };
        let settings = SpsaSettings { gain: SpsaGainKind::Constant, seed: 1, ..spsa_settings_default() };
        let mut opt = ptr::null_mut();
        unsafe {
            spsa_optimizer_new(obj, &settings, [10.0].as_ptr(), 1, &mut opt);
            assert_eq!(spsa_optimizer_run(opt, 10_000, 1e6), SpsaStatus::Diverged);
            assert!(spsa_optimizer_iteration(opt) < 10_000);
            assert!(last_error().contains("diverged"));
            spsa_optimizer_free(opt);
            spsa_objective_free(obj);
        }
    }

    #[test]
    fn guard_threshold_floor() {
        let mut obj = ptr::null_mut();
        unsafe { spsa_objective_builtin(SpsaBuiltin::Quadratic1d, &mut obj) };
        let mut opt = ptr::null_mut();
        unsafe {
            spsa_optimizer_new(obj, &spsa_settings_default(), [1.0].as_ptr(), 1, &mut opt);
            assert_eq!(spsa_optimizer_run(opt, 1, 10.0), SpsaStatus::Config);
            spsa_optimizer_free(opt);
            spsa_objective_free(obj);
        }
    }

    unsafe extern "C" fn shifted_square(theta: *const f64, dim: usize, data: *mut c_void) -> f64 {
        let shift = *(data as *const f64);
        slice::from_raw_parts(theta, dim).iter().map(|t| (t - shift).powi(2)).sum()
    }

    #[test]
    fn callback_objective_and_mean_field() {
        let shift = 0.5f64;
        let mut obj = ptr::null_mut();
        unsafe {
            let status =
                spsa_objective_callback(Some(shifted_square), &shift as *const f64 as *mut c_void, 1, &mut obj);
            assert_eq!(status, SpsaStatus::Ok);
            assert_eq!(spsa_objective_dim(obj), 1);
            let mut v = 0.0;
            spsa_objective_eval(obj, [1.5].as_ptr(), 1, &mut v);
            assert_eq!(v, 1.0);

            // Oblivious gain: the mean field of a quadratic is exactly -grad.
            let settings = SpsaSettings { gain: SpsaGainKind::Constant, ..spsa_settings_default() };
            let mut mf = ptr::null_mut();
            assert_eq!(spsa_meanfield_new(obj, &settings, SpsaFbarMethod::TwoPointExact, 0, &mut mf), SpsaStatus::Ok);
            let mut f = [0.0];
            let mut se = [f64::NAN];
            spsa_meanfield_fbar(mf, [2.0].as_ptr(), 1, f.as_mut_ptr(), se.as_mut_ptr());
            assert!((f[0] + 3.0).abs() < 1e-12);
            assert_eq!(se[0], 0.0);

            let mut star = [0.0];
            let mut eig = [0.0];
            let status = spsa_meanfield_equilibrium(mf, [0.0].as_ptr(), 1, 1e-12, star.as_mut_ptr(), eig.as_mut_ptr());
            assert_eq!(status, SpsaStatus::Ok);
            assert!((star[0] - 0.5).abs() < 1e-9);
            assert!((eig[0] + 2.0).abs() < 1e-5);
            spsa_meanfield_free(mf);
            spsa_objective_free(obj);
        }
    }

    #[test]
    fn monte_carlo_equilibrium_is_rejected() {
        let mut obj = ptr::null_mut();
        let mut mf = ptr::null_mut();
        unsafe {
            spsa_objective_builtin(SpsaBuiltin::TrigQuadratic1d, &mut obj);
            let status = spsa_meanfield_new(obj, &spsa_settings_default(), SpsaFbarMethod::MonteCarlo, 10_000, &mut mf);
            assert_eq!(status, SpsaStatus::Ok);
            let (mut star, mut eig) = ([0.0], [0.0]);
            let status = spsa_meanfield_equilibrium(mf, [0.0].as_ptr(), 1, 1e-10, star.as_mut_ptr(), eig.as_mut_ptr());
            assert_eq!(status, SpsaStatus::Config);
            spsa_meanfield_free(mf);
            spsa_objective_free(obj);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let q = [2.0, 0.0, 0.0, 1.0];
        let mut obj = ptr::null_mut();
        unsafe {
            assert_eq!(spsa_objective_quadratic(q.as_ptr(), 2, &mut obj), SpsaStatus::Ok);
            let mut v = 0.0;
            assert_eq!(spsa_objective_eval(obj, [1.0].as_ptr(), 1, &mut v), SpsaStatus::Dimension);
            assert_eq!(spsa_objective_eval(obj, [1.0, 2.0].as_ptr(), 2, &mut v), SpsaStatus::Ok);
            assert_eq!(v, 3.0);
            spsa_objective_free(obj);
        }
    }

    #[test]
    fn free_accepts_null() {
        unsafe {
            spsa_objective_free(ptr::null_mut());
            spsa_optimizer_free(ptr::null_mut());
            spsa_meanfield_free(ptr::null_mut());
        }
    }
}
