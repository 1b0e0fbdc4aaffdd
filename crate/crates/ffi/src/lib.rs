//! C ABI for `wiener-cubature`.
//!
//! Formulas and models are opaque handles created by constructors such as
//! `wc_formula_nv` or `wc_model_heston` and released with the matching
//! `_free`. Every fallible function returns a [`WcStatus`]; on failure a
//! message is kept per thread (cleared by the next successful call) and can
//! be copied out with [`wc_last_error_message`]. Output values are written
//! only on success, except the required length reported by
//! `wc_formula_write`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use wiener_cubature::cubature::{build_nv_formula, parse_formula, write_formula, CubatureFormula};
use wiener_cubature::flow::FlowConfig;
use wiener_cubature::models::{
    heston_call_price, heston_exact_moments, heston_model, laplacian_eigenvalues, ou_model,
    spde_spectral_model, CallPayoff, CosineOfComponent, HestonParams, ShiftedPower, SpdeNoise,
};
use wiener_cubature::quadrature::{gauss_hermite_normal_1d, tensor_product};
use wiener_cubature::scheme::{compose_many, EvalPlan, Mesh, Strategy, DEFAULT_LEAF_BUDGET};
use wiener_cubature::vectorfields::{Analytic, Model, ScalarFunction};
use wiener_cubature::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Evaluation = 4,
    Flow = 5,
    Method = 6,
    Unsupported = 7,
    Budget = 8,
    Parse = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// A cubature formula.
pub struct WcFormula(CubatureFormula);

/// A model: vector fields, optional linear part and exact flows.
pub struct WcModel(Model);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WcHestonParams {
    pub mu: f64,
    pub kappa: f64,
    pub theta: f64,
    pub beta: f64,
    pub rho: f64,
    pub x0: f64,
    pub v0: f64,
    /// Nonzero for the log-price drift correction `−v/2`.
    pub log_price_convexity: bool,
}

impl From<WcHestonParams> for HestonParams {
    fn from(p: WcHestonParams) -> Self {
        HestonParams {
            mu: p.mu,
            kappa: p.kappa,
            theta: p.theta,
            beta: p.beta,
            rho: p.rho,
            x0: p.x0,
            v0: p.v0,
            log_price_convexity: p.log_price_convexity,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcPayoffKind {
    /// `(x_c − shift)^power`
    Power = 0,
    /// `max(e^{x_c} − strike, 0)`
    Call = 1,
    /// `cos(x_c)`
    Cosine = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WcPayoff {
    pub kind: WcPayoffKind,
    pub component: usize,
    pub shift: f64,
    pub power: i32,
    pub strike: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcStrategy {
    FullTree = 0,
    MonteCarlo = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcFlowMethod {
    /// Exact flows when the model has them, RK4 otherwise.
    Auto = 0,
    Exact = 1,
    Rk4 = 2,
    Adaptive = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WcPlan {
    pub strategy: WcStrategy,
    pub samples: u64,
    pub seed: u64,
    /// Leaf budget of full-tree evaluation.
    pub budget: u64,
    pub flow: WcFlowMethod,
    pub steps_per_segment: usize,
    pub tolerance: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcMeshKind {
    Uniform = 0,
    /// `t_i = T(1 − (1 − i/n)^γ)`
    Graded = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: WcStatus, msg: impl AsRef<str>) -> WcStatus {
    set_last_error(msg.as_ref());
    status
}

fn status_of(e: &Error) -> WcStatus {
    match e {
        Error::Argument(_) => WcStatus::InvalidArgument,
        Error::Domain(_) => WcStatus::Domain,
        Error::Evaluation(_) => WcStatus::Evaluation,
        Error::Flow { .. } => WcStatus::Flow,
        Error::Method(_) => WcStatus::Method,
        Error::Unsupported(_) => WcStatus::Unsupported,
        Error::Budget { .. } => WcStatus::Budget,
        Error::Parse { .. } => WcStatus::Parse,
    }
}

impl From<Error> for WcStatus {
    fn from(e: Error) -> Self {
        fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, converting panics into [`WcStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), WcStatus>) -> WcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            WcStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(WcStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, WcStatus> {
    // SAFETY: callers pass either null or a pointer to a live value.
    unsafe { p.as_ref() }.ok_or_else(|| fail(WcStatus::NullPointer, format!("{name} is null")))
}

fn out_ptr<T>(p: *mut T, name: &str) -> Result<*mut T, WcStatus> {
    if p.is_null() {
        Err(fail(WcStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(p)
    }
}

fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], WcStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(WcStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: the caller guarantees `len` readable values at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, WcStatus> {
    if p.is_null() {
        return Err(fail(WcStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: the caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        fail(
            WcStatus::InvalidArgument,
            format!("{name} is not valid UTF-8"),
        )
    })
}

/// Copies `text` into `buf` (NUL-terminated) and stores its length without
/// the terminator in `*needed`.
fn copy_out(text: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), WcStatus> {
    if !needed.is_null() {
        // SAFETY: checked non-null; the caller owns the slot.
        unsafe { *needed = text.len() };
    }
    if buf.is_null() || len <= text.len() {
        return Err(fail(
            WcStatus::BufferTooSmall,
            format!("buffer needs {} bytes", text.len() + 1),
        ));
    }
    // SAFETY: `buf` has room for `len > text.len()` bytes.
    unsafe {
        ptr::copy_nonoverlapping(text.as_ptr().cast::<c_char>(), buf, text.len());
        *buf.add(text.len()) = 0;
    }
    Ok(())
}

fn store<T>(out: *mut T, value: T) {
    // SAFETY: every caller checked `out` with `out_ptr` first.
    unsafe { out.write(value) }
}

// ---------------------------------------------------------------------------
// Library information and errors

/// Version string of the library, statically allocated.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` and returns
/// its length without the terminator. Pass a null `buf` to query the
/// length; the message is truncated to `len − 1` bytes.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            // SAFETY: `buf` has room for `len` bytes.
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

// ---------------------------------------------------------------------------
// Formulas

/// Ninomiya-Victoir formula over a tensor Gauss-Hermite rule of the given
/// degree (1, 3, 5 or 7) in `brownian_dim` dimensions.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_formula_nv(
    brownian_dim: usize,
    degree: usize,
    out: *mut *mut WcFormula,
) -> WcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if brownian_dim == 0 {
            return Err(fail(
                WcStatus::InvalidArgument,
                "brownian_dim must be positive",
            ));
        }
        let g = gauss_hermite_normal_1d(degree)?;
        let f = build_nv_formula(&tensor_product(&vec![g; brownian_dim])?)?;
        store(out, Box::into_raw(Box::new(WcFormula(f))));
        Ok(())
    })
}

/// Parses a formula from its text format.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_formula_parse(
    text: *const c_char,
    out: *mut *mut WcFormula,
) -> WcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let f = parse_formula(string(text, "text")?)?;
        store(out, Box::into_raw(Box::new(WcFormula(f))));
        Ok(())
    })
}

/// Writes the text format of `formula` into `buf`. `*needed` receives the
/// text length without the terminator even when `buf` is too small.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_formula_write(
    formula: *const WcFormula,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> WcStatus {
    guard(|| {
        let f = non_null(formula, "formula")?;
        copy_out(&write_formula(&f.0), buf, len, needed)
    })
}

/// Releases a formula; null is ignored.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_formula_free(formula: *mut WcFormula) {
    if !formula.is_null() {
        // SAFETY: created by `Box::into_raw` in this library and freed once.
        drop(unsafe { Box::from_raw(formula) });
    }
}

/// Number of paths, 0 for null.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_formula_len(formula: *const WcFormula) -> usize {
    // SAFETY: null or a live handle.
    unsafe { formula.as_ref() }.map_or(0, |f| f.0.len())
}

/// Brownian dimension, 0 for null.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_formula_brownian_dim(formula: *const WcFormula) -> usize {
    // SAFETY: null or a live handle.
    unsafe { formula.as_ref() }.map_or(0, |f| f.0.brownian_dim())
}

/// Largest defect of the order conditions up to degree `m`, and whether
/// all of them hold to tolerance.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_formula_verify_order(
    formula: *const WcFormula,
    m: usize,
    max_defect: *mut f64,
    passed: *mut bool,
) -> WcStatus {
    guard(|| {
        let f = non_null(formula, "formula")?;
        let max_defect = out_ptr(max_defect, "max_defect")?;
        let passed = out_ptr(passed, "passed")?;
        let r = f.0.verify_order(m)?;
        store(max_defect, r.max_defect);
        store(passed, r.passed);
        Ok(())
    })
}

/// Weak symmetry sampled at `samples ≥ 2` equidistant points of `[0, 1]`.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_formula_check_weak_symmetry(
    formula: *const WcFormula,
    samples: usize,
    max_violation: *mut f64,
    passed: *mut bool,
) -> WcStatus {
    guard(|| {
        let f = non_null(formula, "formula")?;
        let max_violation = out_ptr(max_violation, "max_violation")?;
        let passed = out_ptr(passed, "passed")?;
        if samples < 2 {
            return Err(fail(WcStatus::InvalidArgument, "need at least two samples"));
        }
        let grid: Vec<f64> = (0..samples)
            .map(|i| i as f64 / (samples - 1) as f64)
            .collect();
        let r = f.0.check_weak_symmetry(&grid)?;
        store(max_violation, r.max_violation);
        store(passed, r.passed);
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Models

/// The Heston benchmark parameters.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_heston_benchmark_params(out: *mut WcHestonParams) -> WcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = HestonParams::benchmark_instance();
        store(
            out,
            WcHestonParams {
                mu: p.mu,
                kappa: p.kappa,
                theta: p.theta,
                beta: p.beta,
                rho: p.rho,
                x0: p.x0,
                v0: p.v0,
                log_price_convexity: p.log_price_convexity,
            },
        );
        Ok(())
    })
}

/// Heston model in Stratonovich form with exact split flows.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_model_heston(
    params: *const WcHestonParams,
    out: *mut *mut WcModel,
) -> WcStatus {
    guard(|| {
        let p: HestonParams = (*non_null(params, "params")?).into();
        let out = out_ptr(out, "out")?;
        p.validate()?;
        store(out, Box::into_raw(Box::new(WcModel(heston_model(&p)?))));
        Ok(())
    })
}

/// `dX = −X dt + dB`.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_model_ou(out: *mut *mut WcModel) -> WcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        store(out, Box::into_raw(Box::new(WcModel(ou_model()))));
        Ok(())
    })
}

/// Spectral model with `modes` Laplacian modes and one saturating noise
/// along `h_k ∝ k^{−decay_power}`.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_model_spde(
    modes: usize,
    sigma: f64,
    decay_power: f64,
    out: *mut *mut WcModel,
) -> WcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = spde_spectral_model(
            &laplacian_eigenvalues(modes),
            &SpdeNoise::Projected { sigma, decay_power },
        )?;
        store(out, Box::into_raw(Box::new(WcModel(m))));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_model_free(model: *mut WcModel) {
    if !model.is_null() {
        // SAFETY: created by `Box::into_raw` in this library and freed once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// State dimension, 0 for null.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_model_dim(model: *const WcModel) -> usize {
    // SAFETY: null or a live handle.
    unsafe { model.as_ref() }.map_or(0, |m| m.0.dim())
}

/// Number of driving Brownian motions, 0 for null.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_model_brownian_dim(model: *const WcModel) -> usize {
    // SAFETY: null or a live handle.
    unsafe { model.as_ref() }.map_or(0, |m| m.0.brownian_dim())
}

/// Mean, variance, skewness and kurtosis of the Heston log-price at `t`.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_heston_exact_moments(
    params: *const WcHestonParams,
    t: f64,
    out: *mut f64,
) -> WcStatus {
    guard(|| {
        let p: HestonParams = (*non_null(params, "params")?).into();
        let out = out_ptr(out, "out")?;
        let m = heston_exact_moments(&p, t)?.as_array();
        // SAFETY: the caller provides room for four values.
        unsafe { ptr::copy_nonoverlapping(m.as_ptr(), out, 4) };
        Ok(())
    })
}

/// Price of `max(e^{X_t} − strike, 0)` under the Heston model.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_heston_call_price(
    params: *const WcHestonParams,
    t: f64,
    strike: f64,
    out: *mut f64,
) -> WcStatus {
    guard(|| {
        let p: HestonParams = (*non_null(params, "params")?).into();
        let out = out_ptr(out, "out")?;
        store(out, heston_call_price(&p, t, strike)?);
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Composition

/// Full-tree plan with the default leaf budget and automatic flows.
#[no_mangle]
pub extern "C" fn wc_plan_default() -> WcPlan {
    WcPlan {
        strategy: WcStrategy::FullTree,
        samples: 0,
        seed: 0,
        budget: DEFAULT_LEAF_BUDGET,
        flow: WcFlowMethod::Auto,
        steps_per_segment: 8,
        tolerance: 1e-10,
    }
}

fn eval_plan(plan: &WcPlan, model: &Model) -> Result<EvalPlan, WcStatus> {
    let flow = match plan.flow {
        WcFlowMethod::Auto => FlowConfig::default_for(model),
        WcFlowMethod::Exact => FlowConfig::exact(),
        WcFlowMethod::Rk4 => FlowConfig::rk4(plan.steps_per_segment)?,
        WcFlowMethod::Adaptive => FlowConfig::adaptive(plan.tolerance)?,
    };
    Ok(match plan.strategy {
        WcStrategy::FullTree => EvalPlan {
            strategy: Strategy::FullTree {
                budget: plan.budget,
            },
            flow,
        },
        WcStrategy::MonteCarlo => EvalPlan::monte_carlo(plan.samples, plan.seed, flow)?,
    })
}

fn payoff(p: &WcPayoff, dim: usize) -> Result<Box<dyn ScalarFunction>, WcStatus> {
    if p.component >= dim {
        return Err(fail(
            WcStatus::InvalidArgument,
            "payoff component out of range",
        ));
    }
    Ok(match p.kind {
        WcPayoffKind::Power => Box::new(Analytic(ShiftedPower {
            component: p.component,
            shift: p.shift,
            power: p.power,
        })),
        WcPayoffKind::Call => Box::new(Analytic(CallPayoff {
            component: p.component,
            strike: p.strike,
        })),
        WcPayoffKind::Cosine => Box::new(Analytic(CosineOfComponent {
            component: p.component,
        })),
    })
}

/// `Q_{Δt_1} ⋯ Q_{Δt_n} f(x)` on a uniform or graded mesh of `[0, horizon]`
/// with `n_steps` steps. `std_error` (may be null) receives the Monte-Carlo
/// standard error, 0 for full-tree plans.
///
/// # Safety
/// Pointer arguments must be null or valid for the documented access, and
/// handles must come from this library and not be used after being freed.
#[no_mangle]
pub unsafe extern "C" fn wc_compose(
    model: *const WcModel,
    formula: *const WcFormula,
    f: *const WcPayoff,
    x: *const f64,
    x_len: usize,
    horizon: f64,
    n_steps: usize,
    mesh_kind: WcMeshKind,
    gamma: f64,
    plan: *const WcPlan,
    value: *mut f64,
    std_error: *mut f64,
) -> WcStatus {
    guard(|| {
        let model = &non_null(model, "model")?.0;
        let formula = &non_null(formula, "formula")?.0;
        let f = payoff(non_null(f, "payoff")?, model.dim())?;
        let x = slice(x, x_len, "x")?;
        let plan = eval_plan(non_null(plan, "plan")?, model)?;
        let value = out_ptr(value, "value")?;
        if x.len() != model.dim() {
            return Err(fail(
                WcStatus::InvalidArgument,
                "x must have the model's dimension",
            ));
        }
        let mesh = match mesh_kind {
            WcMeshKind::Uniform => Mesh::uniform(n_steps, horizon)?,
            WcMeshKind::Graded => Mesh::graded(n_steps, horizon, gamma)?,
        };
        let est = compose_many(model, formula, &[f.as_ref()], x, &mesh, &plan)?;
        store(value, est.values[0]);
        if !std_error.is_null() {
            store(std_error, est.std_errors[0]);
        }
        Ok(())
    })
}
