//! Command-line front end: configuration, the six experiment commands and
//! their CSV artifacts.
//!
//! A configuration is a TOML file of flat sections. Every key has a default,
//! so an empty file is a valid configuration for every command:
//!
//! ```toml
//! [model]
//! name = "heston"          # heston | ou | linear | zero | spde
//! horizon = 0.25           # default 0.25 for heston, 0.5 for spde, else 1
//! x0 = [2.197, 0.0625]     # default: the model's natural initial state
//!
//! [heston]                 # default: the benchmark instance
//! mu = 0.02
//! # kappa, theta, beta, rho, x0, v0, log_price_convexity
//!
//! [formula]
//! kind = "nv"              # nv | paths | file
//! degree = 5               # Gauss-Hermite degree per Brownian dimension
//! order = 5                # order checked by verify-formula
//!
//! [mesh]
//! kind = "uniform"         # uniform | graded
//! n = [1, 2, 3, 4, 5, 6]
//! gamma = 4.0
//!
//! [plan]
//! strategy = "full-tree"   # full-tree | monte-carlo (seed required)
//! flow = "auto"            # auto | exact | rk4 | adaptive
//!
//! [output]
//! record_timing = false
//! ```
//!
//! The remaining sections (`spde`, `payoff`, `weight`, `stability`,
//! `local_order`, `criteria`) are documented on their structs.
//!
//! Exit codes: 0 when the command's pass criterion holds, 1 when it does
//! not, 2 for configuration errors.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::cubature::{build_nv_formula, parse_formula, CubatureFormula, CubaturePath};
use crate::error::Error;
use crate::flow::FlowConfig;
use crate::models::{
    heston_call_price, heston_exact_moments, heston_model, laplacian_eigenvalues,
    linear_test_model, ou_model, spde_spectral_model, CallPayoff, CosineOfComponent, HestonParams,
    MomentSet, ShiftedPower, SpdeNoise,
};
use crate::quadrature::{gauss_hermite_normal_1d, tensor_product};
use crate::scheme::{
    compose, functional_convergence_study, graded_mesh_study, local_order_probe, richardson,
    stability_probe, write_convergence_csv, write_stability_csv, ConvergenceReport, EvalPlan, Mesh,
    Reference, Strategy, DEFAULT_LEAF_BUDGET, FULL_TREE_NOISE_FLOOR,
};
use crate::vectorfields::{
    Analytic, DerivativeMode, Model, ScalarFunction, VectorField, ZeroField,
};
use crate::weights::WeightFunction;

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(
    name = "wiener-cubature",
    version,
    about = "Cubature on Wiener space experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a formula's order conditions and weak symmetry.
    VerifyFormula(CommonArgs),
    /// Moment convergence on the Heston model.
    Heston(CommonArgs),
    /// Weighted stability probe of the one-step operator.
    Stability(CommonArgs),
    /// Order of the local Taylor expansion of the one-step operator.
    LocalOrder(CommonArgs),
    /// Uniform against graded meshes for a nonsmooth payoff.
    Graded(CommonArgs),
    /// Convergence on a spectral Galerkin SPDE model.
    Spde(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Configuration file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides the plan's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::VerifyFormula(_) => "verify-formula",
            Command::Heston(_) => "heston",
            Command::Stability(_) => "stability",
            Command::LocalOrder(_) => "local-order",
            Command::Graded(_) => "graded",
            Command::Spde(_) => "spde",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::VerifyFormula(a)
            | Command::Heston(a)
            | Command::Stability(a)
            | Command::LocalOrder(a)
            | Command::Graded(a)
            | Command::Spde(a) => a,
        }
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    /// Human-readable summary, also written to `summary.txt`.
    pub summary: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// A failure carrying the exit code it maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        // flows and evaluations failing mid-run are results, everything else
        // is a bad configuration
        let code = match e {
            Error::Flow { .. } | Error::Evaluation(_) => 1,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses arguments, runs the command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(&cli.command) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!(
                "{}: {}",
                cli.command.name(),
                if outcome.passed { "PASS" } else { "FAIL" }
            );
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("{}: {}", cli.command.name(), e.message);
            e.code
        }
    }
}

/// Loads the configuration, applies overrides and runs the command,
/// writing its artifacts and `summary.txt` into the output directory.
pub fn execute(command: &Command) -> CliResult<Outcome> {
    let args = command.args();
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.plan.seed = Some(seed);
    }
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", args.out.display())))?;
    let job = || match command {
        Command::VerifyFormula(_) => cmd_verify_formula(&cfg, &args.out),
        Command::Heston(_) => cmd_heston(&cfg, &args.out),
        Command::Stability(_) => cmd_stability(&cfg, &args.out),
        Command::LocalOrder(_) => cmd_local_order(&cfg, &args.out),
        Command::Graded(_) => cmd_graded(&cfg, &args.out),
        Command::Spde(_) => cmd_spde(&cfg, &args.out),
    };
    let outcome = match args.threads {
        Some(0) => return Err(CliError::config("--threads must be positive")),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| CliError::config(format!("cannot build thread pool: {e}")))?
            .install(job)?,
        None => job()?,
    };
    let mut text = outcome.summary.join("\n");
    text.push_str(if outcome.passed {
        "\nPASS\n"
    } else {
        "\nFAIL\n"
    });
    write_file(&args.out.join("summary.txt"), text.as_bytes())?;
    Ok(outcome)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn create(path: &Path) -> CliResult<fs::File> {
    fs::File::create(path)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Configuration

/// Parsed configuration file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    /// Heston parameters; the benchmark instance when absent.
    pub heston: Option<HestonParams>,
    pub spde: SpdeSection,
    pub formula: FormulaSection,
    pub mesh: MeshSection,
    pub plan: PlanSection,
    pub payoff: PayoffSection,
    pub weight: WeightSection,
    pub stability: StabilitySection,
    pub local_order: LocalOrderSection,
    pub criteria: CriteriaSection,
    pub output: OutputSection,
    /// Directory of the configuration file; relative paths resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub horizon: Option<f64>,
    pub x0: Option<Vec<f64>>,
    /// `linear`: drift `matrix·x + offset` and constant diffusion columns.
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub sigmas: Vec<Vec<f64>>,
    /// `zero`: state and Brownian dimensions.
    pub dim: usize,
    pub brownian_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            name: "heston".into(),
            horizon: None,
            x0: None,
            matrix: Vec::new(),
            offset: Vec::new(),
            sigmas: Vec::new(),
            dim: 1,
            brownian_dim: 1,
        }
    }
}

/// `[spde]`: spectral model with `μ_k = −k²` and saturating noise.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpdeSection {
    pub modes: usize,
    /// `projected` (one Brownian motion along `h_k ∝ k^{−decay_power}`) or
    /// `coordinate` (one Brownian motion per mode, strengths `sigmas`).
    pub noise: String,
    pub sigma: f64,
    pub decay_power: f64,
    pub sigmas: Vec<f64>,
    /// Two step counts whose Richardson extrapolation is the reference.
    pub reference_n: Vec<usize>,
    pub reference_order: f64,
}

impl Default for SpdeSection {
    fn default() -> Self {
        SpdeSection {
            modes: 8,
            noise: "projected".into(),
            sigma: 1.0,
            decay_power: 3.0,
            sigmas: Vec::new(),
            reference_n: vec![6, 8],
            reference_order: 2.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormulaSection {
    /// `nv`: Ninomiya-Victoir paths from a tensor Gauss-Hermite rule;
    /// `paths`: inline piecewise linear paths; `file`: the text format.
    pub kind: String,
    pub degree: usize,
    /// Defaults to the model's Brownian dimension (2 for verify-formula).
    pub brownian_dim: Option<usize>,
    /// Order verified by verify-formula; defaults to the declared order.
    pub order: Option<usize>,
    /// `paths`: per path, rows of segment increments `[dt, dB¹, …]`.
    pub paths: Vec<Vec<Vec<f64>>>,
    pub weights: Vec<f64>,
    pub declared_order: usize,
    pub file: Option<PathBuf>,
    /// Points of `[0, 1]` at which weak symmetry is sampled.
    pub symmetry_samples: usize,
}

impl Default for FormulaSection {
    fn default() -> Self {
        FormulaSection {
            kind: "nv".into(),
            degree: 5,
            brownian_dim: None,
            order: None,
            paths: Vec::new(),
            weights: Vec::new(),
            declared_order: 1,
            file: None,
            symmetry_samples: 101,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    pub kind: String,
    pub n: Vec<usize>,
    pub gamma: f64,
}

impl Default for MeshSection {
    fn default() -> Self {
        MeshSection {
            kind: "uniform".into(),
            n: vec![1, 2, 3, 4, 5, 6],
            gamma: 4.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub strategy: String,
    pub samples: u64,
    pub seed: Option<u64>,
    pub budget: u64,
    pub flow: String,
    pub steps_per_segment: usize,
    pub tolerance: f64,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection {
            strategy: "full-tree".into(),
            samples: 1_000_000,
            seed: None,
            budget: DEFAULT_LEAF_BUDGET,
            flow: "auto".into(),
            steps_per_segment: 8,
            tolerance: 1e-10,
        }
    }
}

/// `[payoff]`: `power` is `(x_c − shift)^power`, `call` is
/// `max(e^{x_c} − strike, 0)`, `cosine` is `cos(x_c)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PayoffSection {
    /// Defaults per command: `call` for graded, `power` for local-order,
    /// `cosine` for spde.
    pub name: Option<String>,
    pub component: usize,
    pub strike: f64,
    pub shift: f64,
    pub power: i32,
    /// Reference value for graded studies on models without a price oracle.
    pub reference: Option<f64>,
}

impl Default for PayoffSection {
    fn default() -> Self {
        PayoffSection {
            name: None,
            component: 0,
            strike: 9.0,
            shift: 0.0,
            power: 4,
            reference: None,
        }
    }
}

/// `[weight]`: `polynomial` `(1+|x|²)^{s/2}` or `cosh` `cosh(α|x|)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSection {
    pub kind: String,
    pub s: f64,
    pub alpha: f64,
}

impl Default for WeightSection {
    fn default() -> Self {
        WeightSection {
            kind: "polynomial".into(),
            s: 8.0,
            alpha: 1.0,
        }
    }
}

/// `[stability]`: tensor grid with `points` per axis on `[lower, upper]`.
/// Bounds default to `x0 ± 1`, with the Heston variance on `[0, 0.5]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySection {
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub points: usize,
    pub dt: Vec<f64>,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection {
            lower: None,
            upper: None,
            points: 10,
            dt: (2..=6).rev().map(|k| 2f64.powi(-k)).collect(),
        }
    }
}

/// `[local_order]`: expansion depth, step sizes and derivative mode
/// (`auto`, `exact` or `fd`).
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalOrderSection {
    pub k: usize,
    pub dt: Vec<f64>,
    pub derivatives: String,
}

impl Default for LocalOrderSection {
    fn default() -> Self {
        LocalOrderSection {
            k: 2,
            dt: (3..=8).map(|k| 2f64.powi(-k)).collect(),
            derivatives: "auto".into(),
        }
    }
}

/// `[criteria]`: pass thresholds.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriteriaSection {
    /// Full-tree Heston: minimum rates for mean, variance, skewness, kurtosis.
    pub min_slopes: Vec<f64>,
    /// Monte-Carlo Heston: relative error bound at the largest `n`.
    pub max_rel_error: f64,
    /// Standard errors of slack for Monte-Carlo comparisons.
    pub sigmas: f64,
    /// Graded studies are compared for `n ≥ graded_n_min`.
    pub graded_n_min: usize,
    /// Minimum rate for the spde command.
    pub min_slope: f64,
}

impl Default for CriteriaSection {
    fn default() -> Self {
        CriteriaSection {
            min_slopes: vec![1.7, 1.7, 1.5, 1.5],
            max_rel_error: 1e-2,
            sigmas: 3.0,
            graded_n_min: 4,
            min_slope: 1.7,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Write wall-clock seconds into convergence CSVs; off keeps output
    /// byte-for-byte reproducible.
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid configuration: {e}")))
    }

    fn heston_params(&self) -> HestonParams {
        self.heston.unwrap_or_else(HestonParams::benchmark_instance)
    }

    pub fn horizon(&self) -> CliResult<f64> {
        let t = self
            .model
            .horizon
            .unwrap_or(match self.model.name.as_str() {
                "heston" => HestonParams::BENCHMARK_HORIZON,
                "spde" => 0.5,
                _ => 1.0,
            });
        if !(t > 0.0 && t.is_finite()) {
            return Err(CliError::config("model.horizon must be positive"));
        }
        Ok(t)
    }

    pub fn build_model(&self) -> CliResult<Model> {
        let m = &self.model;
        let model = match m.name.as_str() {
            "heston" => {
                let p = self.heston_params();
                p.validate()?;
                heston_model(&p)?
            }
            "ou" => ou_model(),
            "linear" => linear_test_model(m.matrix.clone(), m.offset.clone(), m.sigmas.clone())?,
            "zero" => {
                if m.dim == 0 {
                    return Err(CliError::config("model.dim must be positive"));
                }
                let fields: Vec<Arc<dyn VectorField>> = (0..=m.brownian_dim)
                    .map(|_| Arc::new(Analytic(ZeroField)) as Arc<dyn VectorField>)
                    .collect();
                Model::new("zero", m.dim, fields)?
            }
            "spde" => {
                let s = &self.spde;
                if s.modes == 0 {
                    return Err(CliError::config("spde.modes must be positive"));
                }
                let noise = match s.noise.as_str() {
                    "projected" => SpdeNoise::Projected {
                        sigma: s.sigma,
                        decay_power: s.decay_power,
                    },
                    "coordinate" => SpdeNoise::Coordinate {
                        sigmas: if s.sigmas.is_empty() {
                            vec![s.sigma; s.modes]
                        } else {
                            s.sigmas.clone()
                        },
                    },
                    other => return Err(CliError::config(format!("unknown spde.noise {other:?}"))),
                };
                spde_spectral_model(&laplacian_eigenvalues(s.modes), &noise)?
            }
            other => return Err(CliError::config(format!("unknown model {other:?}"))),
        };
        Ok(model)
    }

    pub fn initial_state(&self, model: &Model) -> CliResult<Vec<f64>> {
        let x = match &self.model.x0 {
            Some(x) => x.clone(),
            None => match self.model.name.as_str() {
                "heston" => {
                    let p = self.heston_params();
                    vec![p.x0, p.v0]
                }
                "ou" => vec![1.0],
                "spde" => (1..=model.dim()).map(|k| 1.0 / k as f64).collect(),
                _ => vec![0.0; model.dim()],
            },
        };
        if x.len() != model.dim() || x.iter().any(|v| !v.is_finite()) {
            return Err(CliError::config(format!(
                "model.x0 needs {} finite entries, got {:?}",
                model.dim(),
                x
            )));
        }
        Ok(x)
    }

    /// Builds the configured formula for `brownian_dim` Brownian motions.
    pub fn build_formula(&self, brownian_dim: usize) -> CliResult<CubatureFormula> {
        let f = &self.formula;
        if let Some(d) = f.brownian_dim {
            if d != brownian_dim {
                return Err(CliError::config(format!(
                    "formula.brownian_dim = {d} but the model has {brownian_dim} Brownian motions"
                )));
            }
        }
        let formula = match f.kind.as_str() {
            "nv" => {
                if brownian_dim == 0 {
                    return Err(CliError::config(
                        "an nv formula needs at least one Brownian motion",
                    ));
                }
                let g = gauss_hermite_normal_1d(f.degree)?;
                build_nv_formula(&tensor_product(&vec![g; brownian_dim])?)?
            }
            "paths" => {
                let paths = f
                    .paths
                    .iter()
                    .map(|rows| CubaturePath::from_increments(rows.clone()))
                    .collect::<crate::Result<Vec<_>>>()?;
                CubatureFormula::new(paths, f.weights.clone(), f.declared_order)?
            }
            "file" => {
                let rel = f.file.as_ref().ok_or_else(|| {
                    CliError::config("formula.kind = \"file\" needs formula.file")
                })?;
                let path = self.base_dir.join(rel);
                let text = fs::read_to_string(&path).map_err(|e| {
                    CliError::config(format!("cannot read {}: {e}", path.display()))
                })?;
                parse_formula(&text)?
            }
            other => return Err(CliError::config(format!("unknown formula.kind {other:?}"))),
        };
        if formula.brownian_dim() != brownian_dim {
            return Err(CliError::config(format!(
                "formula has {} Brownian dimensions, expected {brownian_dim}",
                formula.brownian_dim()
            )));
        }
        Ok(formula)
    }

    pub fn flow_config(&self, model: &Model) -> CliResult<FlowConfig> {
        let p = &self.plan;
        Ok(match p.flow.as_str() {
            "auto" => FlowConfig::default_for(model),
            "exact" => {
                if model.exact_flows().is_none() {
                    return Err(CliError::config(
                        "plan.flow = \"exact\" but the model has no exact flows",
                    ));
                }
                FlowConfig::exact()
            }
            "rk4" => FlowConfig::rk4(p.steps_per_segment)?,
            "adaptive" => FlowConfig::adaptive(p.tolerance)?,
            other => return Err(CliError::config(format!("unknown plan.flow {other:?}"))),
        })
    }

    pub fn eval_plan(&self, model: &Model) -> CliResult<EvalPlan> {
        let flow = self.flow_config(model)?;
        let p = &self.plan;
        match p.strategy.as_str() {
            "full-tree" => Ok(EvalPlan {
                strategy: Strategy::FullTree { budget: p.budget },
                flow,
            }),
            "monte-carlo" => {
                let seed = p.seed.ok_or_else(|| {
                    CliError::config("a monte-carlo plan needs plan.seed or --seed")
                })?;
                Ok(EvalPlan::monte_carlo(p.samples, seed, flow)?)
            }
            other => Err(CliError::config(format!("unknown plan.strategy {other:?}"))),
        }
    }

    pub fn mesh(&self, n: usize, horizon: f64) -> crate::Result<Mesh> {
        match self.mesh.kind.as_str() {
            "graded" => Mesh::graded(n, horizon, self.mesh.gamma),
            _ => Mesh::uniform(n, horizon),
        }
    }

    fn check_mesh(&self) -> CliResult<()> {
        match self.mesh.kind.as_str() {
            "uniform" | "graded" => {}
            other => return Err(CliError::config(format!("unknown mesh.kind {other:?}"))),
        }
        if self.mesh.n.len() < 3 || self.mesh.n.contains(&0) {
            return Err(CliError::config(
                "mesh.n needs at least three positive step counts",
            ));
        }
        Ok(())
    }

    pub fn payoff(&self, default: &str, model: &Model) -> CliResult<Box<dyn ScalarFunction>> {
        let p = &self.payoff;
        if p.component >= model.dim() {
            return Err(CliError::config(format!(
                "payoff.component {} is out of range for dimension {}",
                p.component,
                model.dim()
            )));
        }
        let name = p.name.as_deref().unwrap_or(default);
        Ok(match name {
            "power" => Box::new(Analytic(ShiftedPower {
                component: p.component,
                shift: p.shift,
                power: p.power,
            })),
            "call" => Box::new(Analytic(CallPayoff {
                component: p.component,
                strike: p.strike,
            })),
            "cosine" => Box::new(Analytic(CosineOfComponent {
                component: p.component,
            })),
            other => return Err(CliError::config(format!("unknown payoff {other:?}"))),
        })
    }

    pub fn weight(&self) -> CliResult<WeightFunction> {
        Ok(match self.weight.kind.as_str() {
            "polynomial" => WeightFunction::polynomial(self.weight.s)?,
            "cosh" => WeightFunction::cosh(self.weight.alpha)?,
            other => return Err(CliError::config(format!("unknown weight.kind {other:?}"))),
        })
    }

    pub fn stability_grid(&self, x0: &[f64]) -> CliResult<Vec<Vec<f64>>> {
        let s = &self.stability;
        let dim = x0.len();
        let heston = self.model.name == "heston";
        let lower = s.lower.clone().unwrap_or_else(|| {
            let mut l: Vec<f64> = x0.iter().map(|v| v - 1.0).collect();
            if heston {
                l[1] = 0.0;
            }
            l
        });
        let upper = s.upper.clone().unwrap_or_else(|| {
            let mut u: Vec<f64> = x0.iter().map(|v| v + 1.0).collect();
            if heston {
                u[1] = 0.5;
            }
            u
        });
        if lower.len() != dim
            || upper.len() != dim
            || lower.iter().zip(&upper).any(|(l, u)| !(l <= u))
        {
            return Err(CliError::config(
                "stability bounds need one ordered pair per component",
            ));
        }
        if s.points == 0 || (s.points as f64).powi(dim as i32) > 1e6 {
            return Err(CliError::config(
                "stability.points must give between 1 and 10^6 grid points",
            ));
        }
        let axis = |c: usize| -> Vec<f64> {
            if s.points == 1 {
                vec![0.5 * (lower[c] + upper[c])]
            } else {
                (0..s.points)
                    .map(|i| lower[c] + (upper[c] - lower[c]) * i as f64 / (s.points - 1) as f64)
                    .collect()
            }
        };
        let mut grid = vec![Vec::new()];
        for c in 0..dim {
            let values = axis(c);
            grid = grid
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        Ok(grid)
    }
}

// ---------------------------------------------------------------------------
// Commands

/// Order conditions up to the configured order and weak symmetry.
///
/// Writes `verify_formula.csv` with one row per multi-index and a final
/// weak-symmetry row. Weak symmetry only enters the verdict for order at
/// least 1; order 0 asks for nothing beyond unit mass.
pub fn cmd_verify_formula(cfg: &ExperimentConfig, out: &Path) -> CliResult<Outcome> {
    let d = cfg.formula.brownian_dim.unwrap_or(2);
    let formula = cfg.build_formula(d)?;
    let m = cfg.formula.order.unwrap_or(formula.declared_order());
    let samples = cfg.formula.symmetry_samples.max(2);
    let grid: Vec<f64> = (0..samples)
        .map(|i| i as f64 / (samples - 1) as f64)
        .collect();
    let order = formula.verify_order(m)?;
    let symmetry = formula.check_weak_symmetry(&grid)?;

    let mut w = csv::Writer::from_writer(create(&out.join("verify_formula.csv"))?);
    let csv_err = |e: csv::Error| CliError::config(format!("csv output failed: {e}"));
    w.write_record(["check", "multi_index", "degree", "defect", "passed"])
        .map_err(csv_err)?;
    let failing: Vec<String> = order.failures().map(|(a, _)| a.to_string()).collect();
    for (alpha, defect) in &order.defects {
        let ok = !failing.contains(&alpha.to_string());
        w.write_record([
            "order".to_string(),
            alpha.to_string(),
            alpha.degree().to_string(),
            format!("{defect:e}"),
            ok.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.write_record([
        "weak_symmetry".to_string(),
        format!("s={}", symmetry.at),
        String::new(),
        format!("{:e}", symmetry.max_violation),
        symmetry.passed.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush().map_err(|e| CliError::config(e.to_string()))?;

    let mut summary = vec![
        format!("formula: {} paths, Brownian dimension {d}", formula.len()),
        format!(
            "order {m}: max defect {:e} ({})",
            order.max_defect,
            if order.passed { "pass" } else { "fail" }
        ),
    ];
    if !failing.is_empty() {
        summary.push(format!("failing multi-indices: {}", failing.join(" ")));
    }
    summary.push(format!(
        "weak symmetry: max violation {:e} at s = {}",
        symmetry.max_violation, symmetry.at
    ));
    Ok(Outcome {
        passed: order.passed && (m == 0 || symmetry.passed),
        summary,
    })
}

/// Convergence of the four moments of the log-price on the Heston model
/// against the moment oracle. Writes `heston_convergence.csv`.
///
/// A full-tree run passes when every fitted rate reaches its threshold (or
/// every error sits at roundoff); a Monte-Carlo run passes when every
/// relative error at the largest `n` is below the bound plus the configured
/// number of standard errors.
pub fn cmd_heston(cfg: &ExperimentConfig, out: &Path) -> CliResult<Outcome> {
    if cfg.model.name != "heston" {
        return Err(CliError::config(
            "the heston command needs model.name = \"heston\"",
        ));
    }
    cfg.check_mesh()?;
    let params = cfg.heston_params();
    let model = cfg.build_model()?;
    let x = cfg.initial_state(&model)?;
    let horizon = cfg.horizon()?;
    let formula = cfg.build_formula(model.brownian_dim())?;
    let plan = cfg.eval_plan(&model)?;
    let exact = heston_exact_moments(
        &HestonParams {
            x0: x[0],
            v0: x[1],
            ..params
        },
        horizon,
    )?;

    let shift = x[0];
    let powers: Vec<Analytic<ShiftedPower>> = (1..=4)
        .map(|power| {
            Analytic(ShiftedPower {
                component: 0,
                shift,
                power,
            })
        })
        .collect();
    let payoffs: Vec<&dyn ScalarFunction> =
        powers.iter().map(|p| p as &dyn ScalarFunction).collect();
    let functional = |raw: &[f64]| {
        MomentSet::from_shifted_raw(shift, [raw[0], raw[1], raw[2], raw[3]])
            .as_array()
            .to_vec()
    };
    let references: Vec<Reference> = exact
        .as_array()
        .iter()
        .map(|v| Reference::new(*v, "moment ODE"))
        .collect();
    let reports = functional_convergence_study(
        &model,
        &formula,
        &payoffs,
        &functional,
        &MomentSet::NAMES,
        &x,
        &|n| cfg.mesh(n, horizon),
        &cfg.mesh.n,
        &plan,
        &references,
    )?;
    write_convergence_csv(
        create(&out.join("heston_convergence.csv"))?,
        &reports,
        cfg.output.record_timing,
    )?;

    let mut summary = Vec::new();
    let mut passed = true;
    match plan.strategy {
        Strategy::FullTree { .. } => {
            let thresholds = &cfg.criteria.min_slopes;
            if thresholds.len() != 4 {
                return Err(CliError::config("criteria.min_slopes needs four entries"));
            }
            for (report, min) in reports.iter().zip(thresholds) {
                let ok = slope_at_least(report, *min);
                passed &= ok;
                summary.push(format!(
                    "{}: slope {} (need >= {min}) {}",
                    report.quantity,
                    fmt_slope(report.slope),
                    verdict(ok)
                ));
            }
        }
        Strategy::MonteCarlo { .. } => {
            for report in &reports {
                let row = report.rows.last().expect("at least three rows");
                let bound = cfg.criteria.max_rel_error
                    + cfg.criteria.sigmas * row.std_error / row.reference.abs();
                let ok = row.rel_error < bound;
                passed &= ok;
                summary.push(format!(
                    "{} at n={}: relative error {:.3e} (bound {:.3e}) {}",
                    report.quantity,
                    row.n,
                    row.rel_error,
                    bound,
                    verdict(ok)
                ));
            }
        }
    }
    Ok(Outcome { passed, summary })
}

/// Weighted stability probe. Writes `stability.csv`.
pub fn cmd_stability(cfg: &ExperimentConfig, out: &Path) -> CliResult<Outcome> {
    let model = cfg.build_model()?;
    let x0 = cfg.initial_state(&model)?;
    let formula = cfg.build_formula(model.brownian_dim())?;
    let flow = cfg.flow_config(&model)?;
    let psi = cfg.weight()?;
    let grid = cfg.stability_grid(&x0)?;
    let report = stability_probe(&model, &formula, &psi, &grid, &cfg.stability.dt, &flow)?;
    write_stability_csv(create(&out.join("stability.csv"))?, &report)?;
    let mut summary = vec![format!(
        "C~ = {:.6e} over {} states",
        report.c_tilde,
        grid.len()
    )];
    for (dt, max) in &report.per_dt_max {
        summary.push(format!("dt = {dt:e}: max rate {max:.6e}"));
    }
    Ok(Outcome {
        passed: report.passed,
        summary,
    })
}

/// Local Taylor defect of the one-step operator. Writes `local_order.csv`.
pub fn cmd_local_order(cfg: &ExperimentConfig, out: &Path) -> CliResult<Outcome> {
    let model = cfg.build_model()?;
    let x = cfg.initial_state(&model)?;
    let formula = cfg.build_formula(model.brownian_dim())?;
    let flow = cfg.flow_config(&model)?;
    let f = cfg.payoff("power", &model)?;
    let mode = match cfg.local_order.derivatives.as_str() {
        "auto" => DerivativeMode::Auto,
        "exact" => DerivativeMode::Exact,
        "fd" => DerivativeMode::FiniteDifference,
        other => {
            return Err(CliError::config(format!(
                "unknown local_order.derivatives {other:?}"
            )))
        }
    };
    let report = local_order_probe(
        &model,
        &formula,
        f.as_ref(),
        &x,
        &cfg.local_order.dt,
        cfg.local_order.k,
        mode,
        &flow,
    )?;
    let mut w = csv::Writer::from_writer(create(&out.join("local_order.csv"))?);
    let csv_err = |e: csv::Error| CliError::config(format!("csv output failed: {e}"));
    w.write_record(["dt", "defect"]).map_err(csv_err)?;
    for (dt, defect) in &report.defects {
        w.write_record([dt.to_string(), defect.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::config(e.to_string()))?;
    let mut summary = vec![format!(
        "k = {}: slope {} (expected {:.1}, need >= {:.1})",
        cfg.local_order.k,
        fmt_slope(report.slope),
        report.expected,
        report.expected - 0.3
    )];
    if report.unstable_derivatives {
        summary.push("warning: generator terms relied on deeply nested finite differences".into());
    }
    Ok(Outcome {
        passed: report.passed,
        summary,
    })
}

/// Paired uniform and graded studies of one payoff. Writes `graded.csv`.
pub fn cmd_graded(cfg: &ExperimentConfig, out: &Path) -> CliResult<Outcome> {
    cfg.check_mesh()?;
    let model = cfg.build_model()?;
    let x = cfg.initial_state(&model)?;
    let horizon = cfg.horizon()?;
    let formula = cfg.build_formula(model.brownian_dim())?;
    let plan = cfg.eval_plan(&model)?;
    let f = cfg.payoff("call", &model)?;
    let payoff_name = cfg.payoff.name.as_deref().unwrap_or("call");
    let reference = match cfg.payoff.reference {
        Some(v) => Reference::new(v, "configured"),
        None if cfg.model.name == "heston"
            && payoff_name == "call"
            && cfg.payoff.component == 0 =>
        {
            let p = HestonParams {
                x0: x[0],
                v0: x[1],
                ..cfg.heston_params()
            };
            Reference::new(
                heston_call_price(&p, horizon, cfg.payoff.strike)?,
                "characteristic function",
            )
        }
        None => {
            return Err(CliError::config(
                "graded studies need payoff.reference for this model",
            ))
        }
    };
    let study = graded_mesh_study(
        &model,
        &formula,
        f.as_ref(),
        &x,
        horizon,
        &cfg.mesh.n,
        cfg.mesh.gamma,
        &plan,
        &reference,
    )?;
    write_convergence_csv(
        create(&out.join("graded.csv"))?,
        &[study.uniform.clone(), study.graded.clone()],
        cfg.output.record_timing,
    )?;
    let mut summary = vec![format!(
        "reference {:.12} ({})",
        reference.value, reference.source
    )];
    for (u, g) in study.uniform.rows.iter().zip(&study.graded.rows) {
        summary.push(format!(
            "n = {}: uniform error {:.3e} +- {:.1e}, graded error {:.3e} +- {:.1e}",
            u.n, u.abs_error, u.std_error, g.abs_error, g.std_error
        ));
    }
    Ok(Outcome {
        passed: study.graded_not_worse(cfg.criteria.graded_n_min, cfg.criteria.sigmas),
        summary,
    })
}

/// Convergence on the spectral SPDE model against a Richardson reference.
/// Writes `spde_convergence.csv`.
pub fn cmd_spde(cfg: &ExperimentConfig, out: &Path) -> CliResult<Outcome> {
    if cfg.model.name != "spde" {
        return Err(CliError::config(
            "the spde command needs model.name = \"spde\"",
        ));
    }
    cfg.check_mesh()?;
    let model = cfg.build_model()?;
    let x = cfg.initial_state(&model)?;
    let horizon = cfg.horizon()?;
    let formula = cfg.build_formula(model.brownian_dim())?;
    let plan = cfg.eval_plan(&model)?;
    let f = cfg.payoff("cosine", &model)?;
    let (n1, n2) = match cfg.spde.reference_n.as_slice() {
        [a, b] if a < b => (*a, *b),
        _ => {
            return Err(CliError::config(
                "spde.reference_n needs two increasing step counts",
            ))
        }
    };
    let v1 = compose(
        &model,
        &formula,
        f.as_ref(),
        &x,
        &cfg.mesh(n1, horizon)?,
        &plan,
    )?;
    let v2 = compose(
        &model,
        &formula,
        f.as_ref(),
        &x,
        &cfg.mesh(n2, horizon)?,
        &plan,
    )?;
    let reference = Reference::new(
        richardson(n1, v1, n2, v2, cfg.spde.reference_order)?,
        format!("Richardson from n = {n1}, {n2}"),
    );
    let reports = functional_convergence_study(
        &model,
        &formula,
        &[f.as_ref()],
        &|v: &[f64]| v.to_vec(),
        &["value"],
        &x,
        &|n| cfg.mesh(n, horizon),
        &cfg.mesh.n,
        &plan,
        std::slice::from_ref(&reference),
    )?;
    write_convergence_csv(
        create(&out.join("spde_convergence.csv"))?,
        &reports,
        cfg.output.record_timing,
    )?;
    let report = &reports[0];
    let ok = slope_at_least(report, cfg.criteria.min_slope);
    Ok(Outcome {
        passed: ok,
        summary: vec![
            format!(
                "modes = {}, reference {:.12} ({})",
                model.dim(),
                reference.value,
                reference.source
            ),
            format!(
                "slope {} (need >= {}) {}",
                fmt_slope(report.slope),
                cfg.criteria.min_slope,
                verdict(ok)
            ),
        ],
    })
}

/// A rate passes when it reaches `min`, or when no error rises above the
/// noise floor (the scheme is exact for this quantity).
fn slope_at_least(report: &ConvergenceReport, min: f64) -> bool {
    match report.slope {
        Some(s) => s >= min,
        None => report
            .rows
            .iter()
            .all(|r| r.abs_error <= 10.0 * r.std_error.max(FULL_TREE_NOISE_FLOOR)),
    }
}

fn fmt_slope(slope: Option<f64>) -> String {
    slope.map_or_else(|| "n/a".to_string(), |s| format!("{s:.3}"))
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn config(text: &str) -> ExperimentConfig {
        ExperimentConfig::parse(text).unwrap()
    }

    #[test]
    fn empty_config_uses_documented_defaults() {
        let cfg = config("");
        assert_eq!(cfg.model.name, "heston");
        assert_eq!(cfg.horizon().unwrap(), 0.25);
        assert_eq!(cfg.mesh.n, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(cfg.heston_params(), HestonParams::benchmark_instance());
        assert!(!cfg.output.record_timing);
        let model = cfg.build_model().unwrap();
        assert_eq!(cfg.initial_state(&model).unwrap(), vec![9f64.ln(), 0.0625]);
        assert_eq!(cfg.build_formula(2).unwrap().len(), 18);
    }

    #[test]
    fn unknown_keys_and_names_are_configuration_errors() {
        assert_eq!(
            ExperimentConfig::parse("[model]\nnmae = 1\n")
                .unwrap_err()
                .code,
            2
        );
        let cfg = config("[model]\nname = \"bogus\"\n");
        assert_eq!(cfg.build_model().unwrap_err().code, 2);
        let cfg = config("[plan]\nstrategy = \"monte-carlo\"\n");
        let model = ou_model();
        assert_eq!(cfg.eval_plan(&model).unwrap_err().code, 2);
        let cfg = config("[plan]\nstrategy = \"monte-carlo\"\nseed = 3\n");
        assert!(cfg.eval_plan(&model).is_ok());
    }

    #[test]
    fn error_codes_separate_results_from_configuration() {
        let flow: CliError = Error::Flow {
            path: 1,
            reason: "x".into(),
        }
        .into();
        assert_eq!(flow.code, 1);
        let arg: CliError = Error::Argument("x".into()).into();
        assert_eq!(arg.code, 2);
    }

    #[test]
    fn single_path_formula_fails_at_the_first_brownian_index() {
        let dir = tempdir().unwrap();
        let cfg = config(
            "[formula]\nkind = \"paths\"\nbrownian_dim = 1\npaths = [[[1.0, 1.0]]]\nweights = [1.0]\norder = 2\n",
        );
        let outcome = cmd_verify_formula(&cfg, dir.path()).unwrap();
        assert!(!outcome.passed);
        assert!(
            outcome
                .summary
                .iter()
                .any(|l| l.contains("failing multi-indices: (1)")),
            "{:?}",
            outcome.summary
        );
        let csv = fs::read_to_string(dir.path().join("verify_formula.csv")).unwrap();
        assert!(
            csv.lines()
                .any(|l| l.starts_with("order,(1),1,") && l.ends_with("false")),
            "{csv}"
        );
    }

    #[test]
    fn order_zero_passes_for_any_unit_mass_formula() {
        let dir = tempdir().unwrap();
        let cfg = config(
            "[formula]\nkind = \"paths\"\nbrownian_dim = 1\npaths = [[[1.0, 1.0]]]\nweights = [1.0]\norder = 0\n",
        );
        assert!(cmd_verify_formula(&cfg, dir.path()).unwrap().passed);
    }

    #[test]
    fn nv_formula_verifies() {
        let dir = tempdir().unwrap();
        let outcome = cmd_verify_formula(&config(""), dir.path()).unwrap();
        assert!(outcome.passed, "{:?}", outcome.summary);
    }

    #[test]
    fn formula_file_resolves_relative_to_the_config() {
        let dir = tempdir().unwrap();
        let g = gauss_hermite_normal_1d(5).unwrap();
        let f = build_nv_formula(&tensor_product(&[g]).unwrap()).unwrap();
        fs::write(dir.path().join("f.txt"), crate::cubature::write_formula(&f)).unwrap();
        let cfg_path = dir.path().join("c.cfg");
        fs::write(
            &cfg_path,
            "[formula]\nkind = \"file\"\nfile = \"f.txt\"\nbrownian_dim = 1\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::from_file(&cfg_path).unwrap();
        assert_eq!(cfg.build_formula(1).unwrap(), f);
    }

    #[test]
    fn stability_on_the_zero_model_has_zero_rate() {
        let dir = tempdir().unwrap();
        let cfg = config(
            "[model]\nname = \"zero\"\ndim = 2\nbrownian_dim = 1\n[stability]\npoints = 3\n",
        );
        let outcome = cmd_stability(&cfg, dir.path()).unwrap();
        assert!(outcome.passed);
        let csv = fs::read_to_string(dir.path().join("stability.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 9 * 5);
    }

    #[test]
    fn stability_grid_uses_heston_variance_bounds() {
        let cfg = config("[stability]\npoints = 2\n");
        let grid = cfg.stability_grid(&[2.0, 0.0625]).unwrap();
        assert_eq!(
            grid,
            vec![
                vec![1.0, 0.0],
                vec![1.0, 0.5],
                vec![3.0, 0.0],
                vec![3.0, 0.5]
            ]
        );
    }

    #[test]
    fn local_order_on_ou_reaches_the_expected_slope() {
        let dir = tempdir().unwrap();
        let cfg = config("[model]\nname = \"ou\"\n[local_order]\nderivatives = \"exact\"\n");
        let outcome = cmd_local_order(&cfg, dir.path()).unwrap();
        assert!(outcome.passed, "{:?}", outcome.summary);
    }

    #[test]
    fn heston_rejects_other_models_and_short_n_lists() {
        let dir = tempdir().unwrap();
        assert_eq!(
            cmd_heston(&config("[model]\nname = \"ou\"\n"), dir.path())
                .unwrap_err()
                .code,
            2
        );
        assert_eq!(
            cmd_heston(&config("[mesh]\nn = [1, 2]\n"), dir.path())
                .unwrap_err()
                .code,
            2
        );
    }

    #[test]
    fn budget_overflow_is_a_configuration_error() {
        let dir = tempdir().unwrap();
        let cfg = config("[mesh]\nn = [1, 2, 3]\n[plan]\nbudget = 10\n");
        assert_eq!(cmd_heston(&cfg, dir.path()).unwrap_err().code, 2);
    }

    #[test]
    fn deterministic_heston_run_passes_and_reproduces() {
        let cfg =
            config("[mesh]\nn = [1, 2, 3, 4]\n[criteria]\nmin_slopes = [1.5, 1.0, 1.0, 1.0]\n");
        let a = tempdir().unwrap();
        let b = tempdir().unwrap();
        cmd_heston(&cfg, a.path()).unwrap();
        cmd_heston(&cfg, b.path()).unwrap();
        let read =
            |d: &tempfile::TempDir| fs::read(d.path().join("heston_convergence.csv")).unwrap();
        assert_eq!(read(&a), read(&b));
        let text = String::from_utf8(read(&a)).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 4);
    }
}
