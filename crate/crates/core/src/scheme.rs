//! The one-step cubature operator `Q_Δt f(x) = Σ_i λ_i f(X^x_Δt(ω_i))`, its
//! composition over time meshes, and diagnostics built on it.
//!
//! Composition is evaluated either exactly, by depth-first traversal of the
//! `N^n` tree of path sequences, or by Monte Carlo over root-to-leaf paths.
//! Monte Carlo samples are drawn in fixed-size chunks; chunk `c` uses a
//! ChaCha8 generator seeded with the master seed on stream `c`, and chunk
//! results are combined in chunk order, so estimates do not depend on the
//! number of worker threads.

use std::io::Write;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cubature::CubatureFormula;
use crate::error::{argument, Error, Result};
use crate::flow::{evolve_prepared, FlowConfig, PreparedPath, Workspace};
use crate::vectorfields::{generator_power, DerivativeMode, Model, ScalarFunction};
use crate::weights::WeightFunction;

/// Default cap on full-tree leaf evaluations.
pub const DEFAULT_LEAF_BUDGET: u64 = 100_000_000;

/// Monte Carlo samples per independently seeded chunk.
pub const MC_CHUNK: u64 = 4096;

/// Errors below this are treated as roundoff in full-tree rate fits.
pub const FULL_TREE_NOISE_FLOOR: f64 = 1e-11;

// ---------------------------------------------------------------------------
// Meshes and plans

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeshKind {
    Uniform,
    /// `t_i = T(1 − (1 − i/n)^γ)`: steps shrink toward the terminal time.
    Graded {
        gamma: f64,
    },
    Custom,
}

impl MeshKind {
    pub fn label(&self) -> &'static str {
        match self {
            MeshKind::Uniform => "uniform",
            MeshKind::Graded { .. } => "graded",
            MeshKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    times: Vec<f64>,
    kind: MeshKind,
}

impl Mesh {
    pub fn uniform(n: usize, horizon: f64) -> Result<Self> {
        check_mesh_args(n, horizon)?;
        let times = (0..=n)
            .map(|i| {
                if i == n {
                    horizon
                } else {
                    horizon * i as f64 / n as f64
                }
            })
            .collect();
        Ok(Mesh {
            times,
            kind: MeshKind::Uniform,
        })
    }

    pub fn graded(n: usize, horizon: f64, gamma: f64) -> Result<Self> {
        check_mesh_args(n, horizon)?;
        if !(gamma > 1.0 && gamma.is_finite()) {
            return Err(argument("grading exponent must exceed 1"));
        }
        let times = (0..=n)
            .map(|i| {
                if i == n {
                    horizon
                } else {
                    horizon * (1.0 - (1.0 - i as f64 / n as f64).powf(gamma))
                }
            })
            .collect();
        Ok(Mesh {
            times,
            kind: MeshKind::Graded { gamma },
        })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 {
            return Err(argument("a mesh starts at 0 and has at least one step"));
        }
        if times
            .windows(2)
            .any(|w| !(w[1] > w[0]) || !w[1].is_finite())
        {
            return Err(argument(
                "mesh times must be finite and strictly increasing",
            ));
        }
        Ok(Mesh {
            times,
            kind: MeshKind::Custom,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn kind(&self) -> MeshKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nonempty mesh")
    }

    /// Step sizes `t_i − t_{i−1}` in order.
    pub fn step_sizes(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

fn check_mesh_args(n: usize, horizon: f64) -> Result<()> {
    if n == 0 {
        return Err(argument("a mesh needs at least one step"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(argument("the horizon must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    FullTree { budget: u64 },
    MonteCarlo { samples: u64, seed: u64 },
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::FullTree { .. } => "full_tree",
            Strategy::MonteCarlo { .. } => "monte_carlo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPlan {
    pub strategy: Strategy,
    pub flow: FlowConfig,
}

impl EvalPlan {
    pub fn full_tree(flow: FlowConfig) -> Self {
        EvalPlan {
            strategy: Strategy::FullTree {
                budget: DEFAULT_LEAF_BUDGET,
            },
            flow,
        }
    }

    pub fn monte_carlo(samples: u64, seed: u64, flow: FlowConfig) -> Result<Self> {
        if samples == 0 {
            return Err(argument("Monte Carlo needs at least one sample"));
        }
        Ok(EvalPlan {
            strategy: Strategy::MonteCarlo { samples, seed },
            flow,
        })
    }
}

/// Values of several payoffs under the composed operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub values: Vec<f64>,
    /// Monte Carlo standard errors; zero for full-tree evaluation.
    pub std_errors: Vec<f64>,
    /// Per-chunk sample counts and means, for standard errors of smooth
    /// functionals of the values. Empty for full-tree evaluation.
    pub batches: Vec<(u64, Vec<f64>)>,
}

impl Estimate {
    /// Batch-means standard error of `g(values)`.
    pub fn functional_std_error(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        if self.batches.len() < 2 {
            return 0.0;
        }
        let total: u64 = self.batches.iter().map(|b| b.0).sum();
        let center = g(&self.values);
        let ss: f64 = self
            .batches
            .iter()
            .map(|(n, m)| *n as f64 * (g(m) - center).powi(2))
            .sum();
        (ss / (self.batches.len() as f64 - 1.0) / total as f64).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Operators

fn check_model_formula(model: &Model, formula: &CubatureFormula, x: &[f64]) -> Result<()> {
    if formula.brownian_dim() != model.brownian_dim() {
        return Err(argument(format!(
            "formula drives {} Brownian motions, model has {}",
            formula.brownian_dim(),
            model.brownian_dim()
        )));
    }
    if x.len() != model.dim() {
        return Err(argument(format!(
            "state has dimension {}, model has {}",
            x.len(),
            model.dim()
        )));
    }
    Ok(())
}

fn prepared_paths(formula: &CubatureFormula, dt: f64) -> Result<Vec<PreparedPath>> {
    Ok(formula
        .scaled_paths(dt)?
        .iter()
        .map(PreparedPath::new)
        .collect())
}

fn tag_path(step: usize, path: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Evaluation(reason) => Error::Flow {
            path,
            reason: format!("step {}: {reason}", step + 1),
        },
        other => other,
    }
}

/// `Q_Δt f(x)`.
pub fn one_step(
    model: &Model,
    formula: &CubatureFormula,
    f: &dyn ScalarFunction,
    x: &[f64],
    dt: f64,
    cfg: &FlowConfig,
) -> Result<f64> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(argument("the step size must be positive"));
    }
    check_model_formula(model, formula, x)?;
    let paths = prepared_paths(formula, dt)?;
    let mut work = Workspace::new(model.dim());
    let mut state = x.to_vec();
    let mut total = 0.0;
    for (i, (path, w)) in paths.iter().zip(formula.weights()).enumerate() {
        state.copy_from_slice(x);
        evolve_prepared(model, &mut state, path, cfg, &mut work).map_err(tag_path(0, i))?;
        total += w * f.eval(&state);
    }
    Ok(total)
}

/// `Q_{t_1−t_0} ⋯ Q_{t_n−t_{n−1}} f(x)`.
pub fn compose(
    model: &Model,
    formula: &CubatureFormula,
    f: &dyn ScalarFunction,
    x: &[f64],
    mesh: &Mesh,
    plan: &EvalPlan,
) -> Result<f64> {
    Ok(compose_many(model, formula, &[f], x, mesh, plan)?.values[0])
}

/// Composed operator applied to several payoffs along the same tree or samples.
pub fn compose_many(
    model: &Model,
    formula: &CubatureFormula,
    payoffs: &[&dyn ScalarFunction],
    x: &[f64],
    mesh: &Mesh,
    plan: &EvalPlan,
) -> Result<Estimate> {
    check_model_formula(model, formula, x)?;
    if payoffs.is_empty() {
        return Err(argument("at least one payoff is required"));
    }
    let steps: Vec<Vec<PreparedPath>> = mesh
        .step_sizes()
        .iter()
        .map(|&dt| prepared_paths(formula, dt))
        .collect::<Result<_>>()?;
    match plan.strategy {
        Strategy::FullTree { budget } => {
            full_tree(model, formula, payoffs, x, &steps, &plan.flow, budget)
        }
        Strategy::MonteCarlo { samples, seed } => monte_carlo(
            model, formula, payoffs, x, &steps, &plan.flow, samples, seed,
        ),
    }
}

struct TreeWalker<'a> {
    model: &'a Model,
    steps: &'a [Vec<PreparedPath>],
    weights: &'a [f64],
    payoffs: &'a [&'a dyn ScalarFunction],
    cfg: &'a FlowConfig,
    states: Vec<Vec<f64>>,
    sums: Vec<Vec<f64>>,
    work: Workspace,
}

impl<'a> TreeWalker<'a> {
    fn new(
        model: &'a Model,
        steps: &'a [Vec<PreparedPath>],
        weights: &'a [f64],
        payoffs: &'a [&'a dyn ScalarFunction],
        cfg: &'a FlowConfig,
    ) -> Self {
        let n = steps.len();
        TreeWalker {
            model,
            steps,
            weights,
            payoffs,
            cfg,
            states: vec![vec![0.0; model.dim()]; n + 1],
            sums: vec![vec![0.0; payoffs.len()]; n + 1],
            work: Workspace::new(model.dim()),
        }
    }

    /// Fills `sums[level]` with the composed operator from `states[level]`.
    fn walk(&mut self, level: usize) -> Result<()> {
        let n = self.steps.len();
        if level == n {
            let state = &self.states[n];
            for (s, f) in self.sums[n].iter_mut().zip(self.payoffs) {
                *s = f.eval(state);
            }
            return Ok(());
        }
        self.sums[level].iter_mut().for_each(|s| *s = 0.0);
        for i in 0..self.weights.len() {
            let (head, tail) = self.states.split_at_mut(level + 1);
            tail[0].copy_from_slice(&head[level]);
            evolve_prepared(
                self.model,
                &mut tail[0],
                &self.steps[level][i],
                self.cfg,
                &mut self.work,
            )
            .map_err(tag_path(level, i))?;
            self.walk(level + 1)?;
            let w = self.weights[i];
            let (head, tail) = self.sums.split_at_mut(level + 1);
            for (s, c) in head[level].iter_mut().zip(&tail[0]) {
                *s += w * c;
            }
        }
        Ok(())
    }
}

fn full_tree(
    model: &Model,
    formula: &CubatureFormula,
    payoffs: &[&dyn ScalarFunction],
    x: &[f64],
    steps: &[Vec<PreparedPath>],
    cfg: &FlowConfig,
    budget: u64,
) -> Result<Estimate> {
    let n = steps.len();
    let leaves = (formula.len() as f64).powi(n as i32);
    if leaves > budget as f64 {
        return Err(Error::Budget {
            leaves,
            budget,
            suggested_samples: (budget / n as u64).max(MC_CHUNK),
        });
    }
    let weights = formula.weights();
    // each top-level subtree is an independent task; combine in index order
    let children: Vec<Vec<f64>> = (0..weights.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut walker = TreeWalker::new(model, steps, weights, payoffs, cfg);
            walker.states[1].copy_from_slice(x);
            evolve_prepared(
                model,
                &mut walker.states[1],
                &steps[0][i],
                cfg,
                &mut walker.work,
            )
            .map_err(tag_path(0, i))?;
            walker.walk(1)?;
            Ok(walker.sums[1].clone())
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; payoffs.len()];
    for (w, child) in weights.iter().zip(&children) {
        for (v, c) in values.iter_mut().zip(child) {
            *v += w * c;
        }
    }
    Ok(Estimate {
        std_errors: vec![0.0; values.len()],
        values,
        batches: Vec::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn monte_carlo(
    model: &Model,
    formula: &CubatureFormula,
    payoffs: &[&dyn ScalarFunction],
    x: &[f64],
    steps: &[Vec<PreparedPath>],
    cfg: &FlowConfig,
    samples: u64,
    seed: u64,
) -> Result<Estimate> {
    if !formula.has_positive_weights() {
        return Err(argument("Monte Carlo sampling needs positive weights"));
    }
    let weights = formula.weights();
    let total: f64 = weights.iter().sum();
    let mut cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    *cdf.last_mut().expect("nonempty formula") = 1.0;
    let chunks = samples.div_ceil(MC_CHUNK);
    let k = payoffs.len();
    let results: Vec<(u64, Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<(u64, Vec<f64>, Vec<f64>)> {
            let count = MC_CHUNK.min(samples - c * MC_CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let mut work = Workspace::new(model.dim());
            let mut state = vec![0.0; model.dim()];
            let mut sum = vec![0.0; k];
            let mut sum_sq = vec![0.0; k];
            for _ in 0..count {
                state.copy_from_slice(x);
                for (level, paths) in steps.iter().enumerate() {
                    let u: f64 = rng.random();
                    let i = cdf.partition_point(|&p| p <= u).min(cdf.len() - 1);
                    evolve_prepared(model, &mut state, &paths[i], cfg, &mut work)
                        .map_err(tag_path(level, i))?;
                }
                for ((s, q), f) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(payoffs) {
                    let v = f.eval(&state);
                    *s += v;
                    *q += v * v;
                }
            }
            Ok((count, sum, sum_sq))
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    let mut batches = Vec::with_capacity(results.len());
    for (count, s, q) in results {
        for j in 0..k {
            sum[j] += s[j];
            sum_sq[j] += q[j];
        }
        batches.push((count, s.iter().map(|v| v / count as f64).collect()));
    }
    let nf = samples as f64;
    let values: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let std_errors = values
        .iter()
        .zip(&sum_sq)
        .map(|(m, q)| {
            if samples < 2 {
                return 0.0;
            }
            let var = ((q / nf - m * m) * nf / (nf - 1.0)).max(0.0);
            (var / nf).sqrt()
        })
        .collect();
    Ok(Estimate {
        values,
        std_errors,
        batches,
    })
}

// ---------------------------------------------------------------------------
// Stability

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// `max r(x, Δt)` over the grid.
    pub c_tilde: f64,
    /// `(Δt, max_x r(x, Δt))`, in the order of the requested step sizes.
    pub per_dt_max: Vec<(f64, f64)>,
    /// `(x, Δt, r(x, Δt))` for every grid point.
    pub table: Vec<(Vec<f64>, f64, f64)>,
    pub passed: bool,
}

/// `r(x, Δt) = log(Q_Δt ψ(x) / ψ(x)) / Δt` over a grid of states and step sizes.
pub fn stability_probe(
    model: &Model,
    formula: &CubatureFormula,
    psi: &WeightFunction,
    x_grid: &[Vec<f64>],
    dt_grid: &[f64],
    cfg: &FlowConfig,
) -> Result<StabilityReport> {
    if x_grid.is_empty() || dt_grid.is_empty() {
        return Err(argument("stability grids must be nonempty"));
    }
    if dt_grid.iter().any(|dt| !(*dt > 0.0)) {
        return Err(argument("step sizes must be positive"));
    }
    let positive = formula.has_positive_weights();
    let mut table = Vec::with_capacity(x_grid.len() * dt_grid.len());
    let mut per_dt_max = Vec::with_capacity(dt_grid.len());
    let mut work = Workspace::new(model.dim());
    for &dt in dt_grid {
        let paths = prepared_paths(formula, dt)?;
        let mut worst = f64::NEG_INFINITY;
        for x in x_grid {
            check_model_formula(model, formula, x)?;
            let log_psi_x = psi.eval_log(x)?;
            let mut logs = Vec::with_capacity(paths.len());
            for (i, path) in paths.iter().enumerate() {
                let mut y = x.clone();
                evolve_prepared(model, &mut y, path, cfg, &mut work).map_err(tag_path(0, i))?;
                logs.push(psi.eval_log(&y)?);
            }
            let log_q = if positive {
                // log Σ λ_i ψ(y_i) through log-sum-exp
                let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                top + logs
                    .iter()
                    .zip(formula.weights())
                    .map(|(l, w)| w * (l - top).exp())
                    .sum::<f64>()
                    .ln()
            } else {
                logs.iter()
                    .zip(formula.weights())
                    .map(|(l, w)| w * (l - log_psi_x).exp())
                    .sum::<f64>()
                    .ln()
                    + log_psi_x
            };
            let r = (log_q - log_psi_x) / dt;
            if !r.is_finite() {
                return Err(Error::Evaluation(format!(
                    "non-finite stability ratio at x={x:?}, dt={dt}"
                )));
            }
            worst = worst.max(r);
            table.push((x.clone(), dt, r));
        }
        per_dt_max.push((dt, worst));
    }
    let c_tilde = per_dt_max
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let passed = c_tilde.is_finite() && per_dt_max.iter().all(|p| p.1 <= c_tilde + 0.1);
    Ok(StabilityReport {
        c_tilde,
        per_dt_max,
        table,
        passed,
    })
}

// ---------------------------------------------------------------------------
// Local order

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOrderReport {
    /// `(Δt, |Q_Δt f(x) − Σ_{j≤k} Δt^j/j! G^j f(x)|)`.
    pub defects: Vec<(f64, f64)>,
    /// Fitted slope of `log defect` against `log Δt`; `None` when fewer
    /// than two defects exceed roundoff.
    pub slope: Option<f64>,
    pub expected: f64,
    /// Some generator term needed finite differences nested beyond the
    /// reliable depth.
    pub unstable_derivatives: bool,
    pub passed: bool,
}

/// Defect of the local Taylor expansion of `Q_Δt` and its observed order.
#[allow(clippy::too_many_arguments)]
pub fn local_order_probe(
    model: &Model,
    formula: &CubatureFormula,
    f: &dyn ScalarFunction,
    x: &[f64],
    dt_list: &[f64],
    k: usize,
    mode: DerivativeMode,
    cfg: &FlowConfig,
) -> Result<LocalOrderReport> {
    if formula.declared_order() < 2 * k + 1 {
        return Err(argument(format!(
            "a formula of order {} cannot resolve the expansion to k = {k}",
            formula.declared_order()
        )));
    }
    if dt_list.len() < 2 {
        return Err(argument("need at least two step sizes"));
    }
    let mut terms = Vec::with_capacity(k + 1);
    let mut unstable = false;
    for j in 0..=k {
        let est = generator_power(model, f, x, j, mode)?;
        unstable |= est.unstable;
        terms.push(est.value);
    }
    let mut defects = Vec::with_capacity(dt_list.len());
    for &dt in dt_list {
        let q = one_step(model, formula, f, x, dt, cfg)?;
        let mut taylor = 0.0;
        let mut factor = 1.0;
        for (j, g) in terms.iter().enumerate() {
            if j > 0 {
                factor *= dt / j as f64;
            }
            taylor += factor * g;
        }
        defects.push((dt, (q - taylor).abs()));
    }
    let points: Vec<(f64, f64)> = defects
        .iter()
        .filter(|(_, e)| *e > 1e-14)
        .map(|(dt, e)| (dt.ln(), e.ln()))
        .collect();
    let slope = if points.len() >= 2 {
        Some(least_squares_slope(&points))
    } else {
        None
    };
    let expected = (k + 1) as f64;
    let passed = match slope {
        Some(s) => s >= expected - 0.3,
        None => defects.iter().all(|(_, e)| *e <= 1e-12),
    };
    Ok(LocalOrderReport {
        defects,
        slope,
        expected,
        unstable_derivatives: unstable,
        passed,
    })
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------------------
// Convergence studies

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub mesh_kind: &'static str,
    pub strategy: &'static str,
    pub value: f64,
    pub reference: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub std_error: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub quantity: String,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares rate `r` in `error ≈ C n^{−r}`; `None` when fewer than
    /// three errors lie above ten times the noise floor.
    pub slope: Option<f64>,
    /// Number of rows used in the fit.
    pub fitted_points: usize,
    /// Where the reference value comes from.
    pub reference_source: String,
}

/// A reference value and its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub value: f64,
    pub source: String,
}

impl Reference {
    pub fn new(value: f64, source: impl Into<String>) -> Self {
        Reference {
            value,
            source: source.into(),
        }
    }
}

/// Fits the convergence rate from `(n, error, noise)` rows, discarding
/// errors below ten times their noise floor.
pub fn fit_rate(points: &[(usize, f64, f64)]) -> (Option<f64>, usize) {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, e, noise)| *e > 10.0 * noise.max(FULL_TREE_NOISE_FLOOR))
        .map(|(n, e, _)| ((*n as f64).ln(), e.ln()))
        .collect();
    if kept.len() < 3 {
        (None, kept.len())
    } else {
        (Some(-least_squares_slope(&kept)), kept.len())
    }
}

/// Richardson extrapolation of values at `n_coarse < n_fine` steps for a
/// scheme converging like `n^{−order}`.
pub fn richardson(
    n_coarse: usize,
    coarse: f64,
    n_fine: usize,
    fine: f64,
    order: f64,
) -> Result<f64> {
    if n_coarse == 0 || n_fine <= n_coarse || !(order > 0.0) {
        return Err(argument(
            "Richardson extrapolation needs 0 < n_coarse < n_fine and a positive order",
        ));
    }
    let r = (n_fine as f64 / n_coarse as f64).powf(order);
    Ok((r * fine - coarse) / (r - 1.0))
}

fn report_from_rows(quantity: &str, rows: Vec<ConvergenceRow>, source: &str) -> ConvergenceReport {
    let pts: Vec<(usize, f64, f64)> = rows
        .iter()
        .map(|r| (r.n, r.abs_error, r.std_error))
        .collect();
    let (slope, fitted_points) = fit_rate(&pts);
    ConvergenceReport {
        quantity: quantity.to_string(),
        rows,
        slope,
        fitted_points,
        reference_source: source.to_string(),
    }
}

/// Runs the composed operator for several functionals of shared payoffs over
/// meshes with `n ∈ n_list` steps and compares each against its reference.
///
/// `functional` maps the payoff values to the reported quantities; use the
/// identity for plain expectations.
#[allow(clippy::too_many_arguments)]
pub fn functional_convergence_study(
    model: &Model,
    formula: &CubatureFormula,
    payoffs: &[&dyn ScalarFunction],
    functional: &dyn Fn(&[f64]) -> Vec<f64>,
    names: &[&str],
    x: &[f64],
    meshes: &dyn Fn(usize) -> Result<Mesh>,
    n_list: &[usize],
    plan: &EvalPlan,
    references: &[Reference],
) -> Result<Vec<ConvergenceReport>> {
    if n_list.len() < 3 {
        return Err(argument(
            "a convergence study needs at least three values of n",
        ));
    }
    if names.len() != references.len() {
        return Err(argument("one reference per quantity is required"));
    }
    let mut rows: Vec<Vec<ConvergenceRow>> = vec![Vec::new(); names.len()];
    for &n in n_list {
        let mesh = meshes(n)?;
        let start = Instant::now();
        let est = compose_many(model, formula, payoffs, x, &mesh, plan)?;
        let seconds = start.elapsed().as_secs_f64();
        let values = functional(&est.values);
        if values.len() != names.len() {
            return Err(argument(
                "functional returned the wrong number of quantities",
            ));
        }
        for (q, value) in values.iter().enumerate() {
            let se = est.functional_std_error(|v| functional(v)[q]);
            let reference = references[q].value;
            let abs_error = (value - reference).abs();
            rows[q].push(ConvergenceRow {
                n,
                mesh_kind: mesh.kind().label(),
                strategy: plan.strategy.label(),
                value: *value,
                reference,
                abs_error,
                rel_error: if reference != 0.0 {
                    abs_error / reference.abs()
                } else {
                    f64::NAN
                },
                std_error: se,
                seconds,
            });
        }
    }
    Ok(rows
        .into_iter()
        .zip(names)
        .zip(references)
        .map(|((r, name), reference)| report_from_rows(name, r, &reference.source))
        .collect())
}

/// Errors of `compose` on uniform meshes against a reference, and the fitted rate.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    model: &Model,
    formula: &CubatureFormula,
    f: &dyn ScalarFunction,
    x: &[f64],
    horizon: f64,
    n_list: &[usize],
    plan: &EvalPlan,
    reference: &Reference,
) -> Result<ConvergenceReport> {
    let mut reports = functional_convergence_study(
        model,
        formula,
        &[f],
        &|v: &[f64]| v.to_vec(),
        &["value"],
        x,
        &|n| Mesh::uniform(n, horizon),
        n_list,
        plan,
        std::slice::from_ref(reference),
    )?;
    Ok(reports.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradedStudy {
    pub uniform: ConvergenceReport,
    pub graded: ConvergenceReport,
}

impl GradedStudy {
    /// Whether the graded error is at most the uniform error plus
    /// `sigmas` combined standard errors for every `n ≥ n_min`.
    pub fn graded_not_worse(&self, n_min: usize, sigmas: f64) -> bool {
        self.uniform
            .rows
            .iter()
            .zip(&self.graded.rows)
            .filter(|(u, _)| u.n >= n_min)
            .all(|(u, g)| g.abs_error <= u.abs_error + sigmas * u.std_error.hypot(g.std_error))
    }
}

/// Paired uniform and graded convergence studies of one payoff.
#[allow(clippy::too_many_arguments)]
pub fn graded_mesh_study(
    model: &Model,
    formula: &CubatureFormula,
    f: &dyn ScalarFunction,
    x: &[f64],
    horizon: f64,
    n_list: &[usize],
    gamma: f64,
    plan: &EvalPlan,
    reference: &Reference,
) -> Result<GradedStudy> {
    if !(gamma > 1.0) {
        return Err(argument("grading exponent must exceed 1"));
    }
    let run = |meshes: &dyn Fn(usize) -> Result<Mesh>| {
        functional_convergence_study(
            model,
            formula,
            &[f],
            &|v: &[f64]| v.to_vec(),
            &["value"],
            x,
            meshes,
            n_list,
            plan,
            std::slice::from_ref(reference),
        )
        .map(|mut r| r.remove(0))
    };
    Ok(GradedStudy {
        uniform: run(&|n| Mesh::uniform(n, horizon))?,
        graded: run(&|n| Mesh::graded(n, horizon, gamma))?,
    })
}

// ---------------------------------------------------------------------------
// CSV output

/// Writes convergence rows with a leading `quantity` column. With
/// `record_timing` off the `seconds` column is written as 0 so that output
/// is reproducible byte for byte.
pub fn write_convergence_csv<W: Write>(
    out: W,
    reports: &[ConvergenceReport],
    record_timing: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Evaluation(format!("csv output failed: {e}"));
    w.write_record([
        "quantity",
        "n",
        "mesh_kind",
        "strategy",
        "value",
        "reference",
        "abs_error",
        "rel_error",
        "seconds",
        "std_error",
    ])
    .map_err(csv_err)?;
    for report in reports {
        for r in &report.rows {
            w.write_record([
                report.quantity.clone(),
                r.n.to_string(),
                r.mesh_kind.to_string(),
                r.strategy.to_string(),
                format!("{:.17e}", r.value),
                format!("{:.17e}", r.reference),
                format!("{:.17e}", r.abs_error),
                format!("{:.17e}", r.rel_error),
                format!("{:.6}", if record_timing { r.seconds } else { 0.0 }),
                format!("{:.17e}", r.std_error),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()
        .map_err(|e| Error::Evaluation(format!("csv output failed: {e}")))?;
    Ok(())
}

/// Writes `x_0, …, x_{N−1}, dt, ratio` rows of a stability probe.
pub fn write_stability_csv<W: Write>(out: W, report: &StabilityReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Evaluation(format!("csv output failed: {e}"));
    let dim = report.table.first().map_or(0, |r| r.0.len());
    let mut header: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
    header.push("dt".into());
    header.push("ratio".into());
    w.write_record(&header).map_err(csv_err)?;
    for (x, dt, r) in &report.table {
        let mut rec: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
        rec.push(format!("{dt:.17e}"));
        rec.push(format!("{r:.17e}"));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Evaluation(format!("csv output failed: {e}")))?;
    Ok(())
}
