//! Deterministic evolution of a model along a scaled cubature path.
//!
//! On a segment with slope vector `(a_0, …, a_d)` the driven equation is the
//! autonomous ODE `x' = Σ_j a_j V_j(x)`. Segments that activate a single
//! field can use the model's closed-form flows; otherwise the segment is
//! integrated numerically. Models with a diagonal linear part `A` are
//! evolved in mild form through a moving frame anchored at each segment
//! start: `y = e^{-τA} x` solves `y' = Σ_j a_j e^{-τA} V_j(e^{τA} y)` with
//! `τ` the elapsed time inside the segment, and `x = e^{τA} y` at its end.

use crate::cubature::CubaturePath;
use crate::error::{argument, Error, Result};
use crate::vectorfields::{LinearPart, Model};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowMethod {
    /// Compose the model's closed-form single-field flows.
    ExactFlows,
    /// Classical fourth-order Runge-Kutta with a fixed number of steps per segment.
    RungeKutta4 { steps_per_segment: usize },
    /// Dormand-Prince 5(4) with error control.
    Adaptive { tolerance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub method: FlowMethod,
}

impl FlowConfig {
    pub fn exact() -> Self {
        FlowConfig {
            method: FlowMethod::ExactFlows,
        }
    }

    pub fn rk4(steps_per_segment: usize) -> Result<Self> {
        if steps_per_segment == 0 {
            return Err(argument("steps_per_segment must be at least 1"));
        }
        Ok(FlowConfig {
            method: FlowMethod::RungeKutta4 { steps_per_segment },
        })
    }

    pub fn adaptive(tolerance: f64) -> Result<Self> {
        if !(tolerance > 0.0 && tolerance.is_finite()) {
            return Err(argument("adaptive tolerance must be positive"));
        }
        Ok(FlowConfig {
            method: FlowMethod::Adaptive { tolerance },
        })
    }

    /// Exact flows when the model has them, otherwise RK4 with 8 steps.
    pub fn default_for(model: &Model) -> Self {
        if model.exact_flows().is_some() {
            FlowConfig::exact()
        } else {
            FlowConfig {
                method: FlowMethod::RungeKutta4 {
                    steps_per_segment: 8,
                },
            }
        }
    }
}

/// A path preprocessed for repeated evolution.
#[derive(Debug, Clone)]
pub struct PreparedPath {
    segments: Vec<Segment>,
}

#[derive(Debug, Clone)]
struct Segment {
    /// Slopes `a_j`, time first.
    slopes: Vec<f64>,
    /// Parameter length of the segment.
    length: f64,
    /// Active fields with their increments `a_j · length`.
    active: Vec<(usize, f64)>,
}

impl PreparedPath {
    pub fn new(path: &CubaturePath) -> Self {
        let segments = path
            .lengths()
            .zip(path.slopes())
            .map(|(h, row)| Segment {
                slopes: row.clone(),
                length: h,
                active: row
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| **a != 0.0)
                    .map(|(j, a)| (j, a * h))
                    .collect(),
            })
            .collect();
        PreparedPath { segments }
    }

    /// Brownian dimension of the path.
    pub fn brownian_dim(&self) -> usize {
        self.segments.first().map_or(0, |s| s.slopes.len() - 1)
    }
}

/// Scratch buffers reused across evolutions.
#[derive(Debug, Clone)]
pub struct Workspace {
    stages: Vec<Vec<f64>>,
    tmp: Vec<f64>,
    field: Vec<f64>,
    lifted: Vec<f64>,
    err: Vec<f64>,
}

impl Workspace {
    pub fn new(dim: usize) -> Self {
        Workspace {
            stages: vec![vec![0.0; dim]; 7],
            tmp: vec![0.0; dim],
            field: vec![0.0; dim],
            lifted: vec![0.0; dim],
            err: vec![0.0; dim],
        }
    }
}

/// Endpoint of the driven ODE from `x` along `path`.
///
/// Dispatches to the mild evolution when the model has a linear part and
/// exact flows are not requested.
pub fn evolve(model: &Model, x: &[f64], path: &CubaturePath, cfg: &FlowConfig) -> Result<Vec<f64>> {
    check_compatible(model, x, path)?;
    let mut state = x.to_vec();
    let mut work = Workspace::new(model.dim());
    evolve_prepared(model, &mut state, &PreparedPath::new(path), cfg, &mut work)?;
    Ok(state)
}

/// Mild evolution for models with a diagonal linear part.
pub fn evolve_mild(
    model: &Model,
    x: &[f64],
    path: &CubaturePath,
    cfg: &FlowConfig,
) -> Result<Vec<f64>> {
    check_compatible(model, x, path)?;
    let mu = diagonal_of(model)?;
    let mut state = x.to_vec();
    let mut work = Workspace::new(model.dim());
    let prepared = PreparedPath::new(path);
    for seg in &prepared.segments {
        mild_segment(model, &mu, &mut state, seg, cfg, &mut work)?;
    }
    finite(&state)?;
    Ok(state)
}

fn check_compatible(model: &Model, x: &[f64], path: &CubaturePath) -> Result<()> {
    if x.len() != model.dim() {
        return Err(argument(format!(
            "state has dimension {}, model has {}",
            x.len(),
            model.dim()
        )));
    }
    if path.brownian_dim() != model.brownian_dim() {
        return Err(argument(format!(
            "path drives {} Brownian components, model has {}",
            path.brownian_dim(),
            model.brownian_dim()
        )));
    }
    Ok(())
}

fn diagonal_of(model: &Model) -> Result<Vec<f64>> {
    match model.linear() {
        Some(LinearPart::Diagonal(mu)) => Ok(mu.clone()),
        Some(LinearPart::Dense(_)) => Err(Error::Unsupported(
            "mild evolution needs a diagonal linear part".into(),
        )),
        None => Ok(vec![0.0; model.dim()]),
    }
}

fn finite(state: &[f64]) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Evaluation(format!(
            "state became non-finite: {state:?}"
        )))
    }
}

/// In-place evolution along a prepared path.
pub fn evolve_prepared(
    model: &Model,
    state: &mut [f64],
    path: &PreparedPath,
    cfg: &FlowConfig,
    work: &mut Workspace,
) -> Result<()> {
    match cfg.method {
        FlowMethod::ExactFlows => {
            let flows = model
                .exact_flows()
                .ok_or_else(|| Error::Method("the model has no closed-form flows".into()))?;
            for seg in &path.segments {
                match seg.active.as_slice() {
                    [] => {}
                    [(j, inc)] => flows[*j].flow(state, *inc),
                    _ => {
                        return Err(Error::Method(format!(
                            "exact flows need one active field per segment, found {}",
                            seg.active.len()
                        )))
                    }
                }
            }
        }
        _ if model.linear().is_some() => {
            let mu = diagonal_of(model)?;
            for seg in &path.segments {
                mild_segment(model, &mu, state, seg, cfg, work)?;
            }
        }
        _ => {
            for seg in &path.segments {
                if seg.active.is_empty() {
                    continue;
                }
                let rhs =
                    |_t: f64, y: &[f64], out: &mut [f64], field: &mut [f64], _lift: &mut [f64]| {
                        out.iter_mut().for_each(|o| *o = 0.0);
                        for &(j, _) in &seg.active {
                            model.field(j).eval(y, field);
                            let a = seg.slopes[j];
                            for (o, f) in out.iter_mut().zip(field.iter()) {
                                *o += a * f;
                            }
                        }
                    };
                integrate(rhs, state, seg.length, cfg, work)?;
            }
        }
    }
    finite(state)
}

fn mild_segment(
    model: &Model,
    mu: &[f64],
    state: &mut [f64],
    seg: &Segment,
    cfg: &FlowConfig,
    work: &mut Workspace,
) -> Result<()> {
    let time_slope = seg.slopes[0];
    let active: Vec<(usize, f64)> = seg
        .active
        .iter()
        .map(|&(j, _)| (j, seg.slopes[j]))
        .collect();
    if !active.is_empty() {
        let rhs =
            |sigma: f64, y: &[f64], out: &mut [f64], field: &mut [f64], lifted: &mut [f64]| {
                let tau = time_slope * sigma;
                for ((l, yi), m) in lifted.iter_mut().zip(y).zip(mu) {
                    *l = yi * (m * tau).exp();
                }
                out.iter_mut().for_each(|o| *o = 0.0);
                for &(j, a) in &active {
                    model.field(j).eval(lifted, field);
                    for ((o, f), m) in out.iter_mut().zip(field.iter()).zip(mu) {
                        *o += a * (-m * tau).exp() * f;
                    }
                }
            };
        integrate(rhs, state, seg.length, cfg, work)?;
    }
    let tau_end = time_slope * seg.length;
    if tau_end != 0.0 {
        for (s, m) in state.iter_mut().zip(mu) {
            *s *= (m * tau_end).exp();
        }
    }
    Ok(())
}

/// Integrates `y' = rhs(σ, y)` over `σ ∈ [0, length]` in place.
fn integrate<F>(
    rhs: F,
    y: &mut [f64],
    length: f64,
    cfg: &FlowConfig,
    work: &mut Workspace,
) -> Result<()>
where
    F: Fn(f64, &[f64], &mut [f64], &mut [f64], &mut [f64]),
{
    match cfg.method {
        FlowMethod::RungeKutta4 { steps_per_segment } => {
            rk4(&rhs, y, length, steps_per_segment.max(1), work);
            Ok(())
        }
        FlowMethod::Adaptive { tolerance } => dopri5(&rhs, y, length, tolerance, work),
        FlowMethod::ExactFlows => Err(Error::Method(
            "exact flows cannot integrate a general segment".into(),
        )),
    }
}

fn rk4<F>(rhs: &F, y: &mut [f64], length: f64, steps: usize, work: &mut Workspace)
where
    F: Fn(f64, &[f64], &mut [f64], &mut [f64], &mut [f64]),
{
    let h = length / steps as f64;
    let Workspace {
        stages,
        tmp,
        field,
        lifted,
        ..
    } = work;
    let (k1, rest) = stages.split_at_mut(1);
    let (k2, rest) = rest.split_at_mut(1);
    let (k3, rest) = rest.split_at_mut(1);
    let (k1, k2, k3, k4) = (&mut k1[0], &mut k2[0], &mut k3[0], &mut rest[0]);
    for step in 0..steps {
        let t = step as f64 * h;
        rhs(t, y, k1, field, lifted);
        for ((o, a), b) in tmp.iter_mut().zip(y.iter()).zip(k1.iter()) {
            *o = a + 0.5 * h * b;
        }
        rhs(t + 0.5 * h, tmp, k2, field, lifted);
        for ((o, a), b) in tmp.iter_mut().zip(y.iter()).zip(k2.iter()) {
            *o = a + 0.5 * h * b;
        }
        rhs(t + 0.5 * h, tmp, k3, field, lifted);
        for ((o, a), b) in tmp.iter_mut().zip(y.iter()).zip(k3.iter()) {
            *o = a + h * b;
        }
        rhs(t + h, tmp, k4, field, lifted);
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

// Dormand-Prince 5(4) tableau
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn dopri5<F>(rhs: &F, y: &mut [f64], length: f64, tol: f64, work: &mut Workspace) -> Result<()>
where
    F: Fn(f64, &[f64], &mut [f64], &mut [f64], &mut [f64]),
{
    if length == 0.0 {
        return Ok(());
    }
    let n = y.len();
    let mut t = 0.0;
    let mut h = length.min(0.1 * length.abs().max(1e-3));
    let mut attempts = 0usize;
    while t < length {
        attempts += 1;
        if attempts > 1_000_000 {
            return Err(Error::Evaluation(
                "adaptive integrator exceeded its step budget".into(),
            ));
        }
        h = h.min(length - t);
        let Workspace {
            stages,
            tmp,
            field,
            lifted,
            err,
        } = work;
        for s in 0..7 {
            for i in 0..n {
                let mut acc = y[i];
                for (r, a) in A[s].iter().enumerate().take(s) {
                    acc += h * a * stages[r][i];
                }
                tmp[i] = acc;
            }
            let (before, after) = stages.split_at_mut(s);
            let _ = before;
            rhs(t + C[s] * h, tmp, &mut after[0], field, lifted);
        }
        let mut err_norm = 0.0f64;
        for i in 0..n {
            let mut hi = 0.0;
            let mut lo = 0.0;
            for s in 0..7 {
                hi += B5[s] * stages[s][i];
                lo += B4[s] * stages[s][i];
            }
            err[i] = h * (hi - lo);
            tmp[i] = y[i] + h * hi;
            let scale = tol * (1.0 + y[i].abs().max(tmp[i].abs()));
            err_norm = err_norm.max(err[i].abs() / scale);
        }
        if !err_norm.is_finite() {
            h *= 0.25;
            if h < 1e-14 * length {
                return Err(Error::Evaluation(
                    "adaptive integrator step underflow".into(),
                ));
            }
            continue;
        }
        if err_norm <= 1.0 {
            t += h;
            y.copy_from_slice(tmp);
        }
        let factor = if err_norm == 0.0 {
            5.0
        } else {
            (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
    }
    Ok(())
}
