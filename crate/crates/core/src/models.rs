//! Concrete models: Heston with closed-form split flows and exact moments,
//! affine test models, and a spectral truncation of a semilinear SPDE.

use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::jet::Scalar;
use crate::vectorfields::{
    Analytic, ConstantField, GenericField, GenericScalarFunction, LinearPart, Model, SegmentFlow,
    VectorField, ZeroField,
};

// ---------------------------------------------------------------------------
// Heston

/// Heston parameters for the log-price `X` and variance `V`:
///
/// ```text
/// dX = (μ − c·V) dt + √V dB¹
/// dV = κ(θ − V) dt + β√V (ρ dB¹ + √(1−ρ²) dB²)
/// ```
///
/// with `c = 1/2` when `log_price_convexity` is set (the usual log-price of
/// a stock with drift `μ`) and `c = 0` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub mu: f64,
    pub kappa: f64,
    pub theta: f64,
    pub beta: f64,
    pub rho: f64,
    pub x0: f64,
    pub v0: f64,
    #[serde(default = "default_convexity")]
    pub log_price_convexity: bool,
}

fn default_convexity() -> bool {
    true
}

impl HestonParams {
    /// The benchmark instance: `μ=.02, κ=5, θ=.09, β=.6, ρ=−.8, x=log 9, v=.0625`.
    pub fn benchmark_instance() -> Self {
        HestonParams {
            mu: 0.02,
            kappa: 5.0,
            theta: 0.09,
            beta: 0.6,
            rho: -0.8,
            x0: 9f64.ln(),
            v0: 0.0625,
            log_price_convexity: true,
        }
    }

    /// Horizon at which the benchmark's reference moments are attained.
    pub const BENCHMARK_HORIZON: f64 = 0.25;

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.mu, self.kappa, self.theta, self.beta, self.rho, self.x0, self.v0,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(argument("Heston parameters must be finite"));
        }
        if self.kappa <= 0.0 {
            return Err(argument("kappa must be positive"));
        }
        if self.theta < 0.0 || self.v0 < 0.0 || self.beta < 0.0 {
            return Err(argument("theta, beta and v0 must be nonnegative"));
        }
        if self.rho.abs() >= 1.0 {
            return Err(argument("|rho| must be below 1"));
        }
        Ok(())
    }

    /// `2κθ/β²`; the variance stays positive when it exceeds 1.
    pub fn feller_index(&self) -> f64 {
        2.0 * self.kappa * self.theta / (self.beta * self.beta)
    }

    fn convexity(&self) -> f64 {
        if self.log_price_convexity {
            0.5
        } else {
            0.0
        }
    }
}

/// Mean, variance, skewness and kurtosis of a scalar random variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl MomentSet {
    /// Builds the set from the mean and the raw moments `E[(X−s)^k]`,
    /// `k = 1..4`, of the variable shifted by some constant `s`.
    pub fn from_shifted_raw(shift: f64, raw: [f64; 4]) -> Self {
        let [m1, m2, m3, m4] = raw;
        let var = m2 - m1 * m1;
        let c3 = m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3);
        let c4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1.powi(4);
        MomentSet {
            mean: shift + m1,
            variance: var,
            skewness: c3 / var.powf(1.5),
            kurtosis: c4 / (var * var),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.mean, self.variance, self.skewness, self.kurtosis]
    }

    pub const NAMES: [&'static str; 4] = ["mean", "variance", "skewness", "kurtosis"];
}

struct HestonDrift {
    mu: f64,
    kappa: f64,
    theta: f64,
    beta: f64,
    rho: f64,
    c: f64,
}

impl GenericField for HestonDrift {
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        out[0] = x[1] * (-self.c) + (self.mu - 0.25 * self.beta * self.rho);
        out[1] = (-x[1] + self.theta) * self.kappa - 0.25 * self.beta * self.beta;
    }
}

struct HestonDiffusion {
    /// Coefficient of `√v` in the log-price component.
    dx: f64,
    /// Coefficient of `√v` in the variance component.
    dv: f64,
}

impl GenericField for HestonDiffusion {
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        let s = x[1].clamp_min(0.0).sqrt();
        out[0] = s * self.dx;
        out[1] = s * self.dv;
    }
}

struct HestonDriftFlow {
    drift_x: f64,
    kappa: f64,
    theta_shifted: f64,
    c: f64,
}

impl SegmentFlow for HestonDriftFlow {
    fn flow(&self, x: &mut [f64], h: f64) {
        // v' = κ(θ' − v), x' = μ − βρ/4 − c v
        let dev = x[1] - self.theta_shifted;
        let decay = (-self.kappa * h).exp();
        let integral_dev = dev * (-(-self.kappa * h).exp_m1()) / self.kappa;
        x[0] += (self.drift_x - self.c * self.theta_shifted) * h - self.c * integral_dev;
        x[1] = (self.theta_shifted + dev * decay).max(0.0);
    }
}

struct HestonDiffusionFlow {
    dx: bool,
    dv: f64,
}

impl SegmentFlow for HestonDiffusionFlow {
    fn flow(&self, x: &mut [f64], a: f64) {
        // u = √v moves linearly, u' = dv/2, until it reaches 0
        let u0 = x[1].max(0.0).sqrt();
        let k = 0.5 * self.dv;
        let u1 = u0 + k * a;
        let (u_end, x_inc) = if u1 >= 0.0 {
            (u1, a * u0 + 0.5 * k * a * a)
        } else {
            (0.0, -u0 * u0 / (2.0 * k))
        };
        if self.dx {
            x[0] += x_inc;
        }
        x[1] = u_end * u_end;
    }
}

/// The Heston model in Stratonovich form with closed-form split flows.
///
/// Fields: `V_1 = (√v, βρ√v)`, `V_2 = (0, β√(1−ρ²)√v)` and
/// `V_0 = (μ − βρ/4 − c·v, κ(θ−v) − β²/4)`. The variance is clamped at 0
/// after each flow.
pub fn heston_model(p: &HestonParams) -> Result<Model> {
    p.validate()?;
    let c = p.convexity();
    let rho_bar = (1.0 - p.rho * p.rho).sqrt();
    let fields: Vec<Arc<dyn VectorField>> = vec![
        Arc::new(Analytic(HestonDrift {
            mu: p.mu,
            kappa: p.kappa,
            theta: p.theta,
            beta: p.beta,
            rho: p.rho,
            c,
        })),
        Arc::new(Analytic(HestonDiffusion {
            dx: 1.0,
            dv: p.beta * p.rho,
        })),
        Arc::new(Analytic(HestonDiffusion {
            dx: 0.0,
            dv: p.beta * rho_bar,
        })),
    ];
    let flows: Vec<Arc<dyn SegmentFlow>> = vec![
        Arc::new(HestonDriftFlow {
            drift_x: p.mu - 0.25 * p.beta * p.rho,
            kappa: p.kappa,
            theta_shifted: p.theta - p.beta * p.beta / (4.0 * p.kappa),
            c,
        }),
        Arc::new(HestonDiffusionFlow {
            dx: true,
            dv: p.beta * p.rho,
        }),
        Arc::new(HestonDiffusionFlow {
            dx: false,
            dv: p.beta * rho_bar,
        }),
    ];
    Model::new("heston", 2, fields)?.with_exact_flows(flows)
}

const MOMENT_DEGREE: usize = 4;

fn moment_index(a: usize, b: usize) -> usize {
    // monomials y^a v^b with a + b ≤ 4, grouped by total degree
    let deg = a + b;
    deg * (deg + 1) / 2 + b
}

/// Exact moments of the log-price at time `t`.
///
/// The mixed moments `E[(X_t − x_0)^a V_t^b]`, `a + b ≤ 4`, solve a closed
/// linear ODE system (the model is a polynomial process); it is integrated
/// with a matrix exponential.
pub fn heston_exact_moments(p: &HestonParams, t: f64) -> Result<MomentSet> {
    p.validate()?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(argument("the horizon must be positive"));
    }
    let n = (MOMENT_DEGREE + 1) * (MOMENT_DEGREE + 2) / 2;
    let c = p.convexity();
    let mut gen = DMatrix::<f64>::zeros(n, n);
    for deg in 0..=MOMENT_DEGREE {
        for b in 0..=deg {
            let a = deg - b;
            let row = moment_index(a, b);
            let (af, bf) = (a as f64, b as f64);
            let mut add = |aa: usize, bb: usize, coef: f64| {
                if coef != 0.0 {
                    gen[(row, moment_index(aa, bb))] += coef;
                }
            };
            if a >= 1 {
                add(a - 1, b, p.mu * af + p.beta * p.rho * af * bf);
                add(a - 1, b + 1, -c * af);
            }
            if a >= 2 {
                add(a - 2, b + 1, 0.5 * af * (af - 1.0));
            }
            if b >= 1 {
                add(
                    a,
                    b - 1,
                    p.kappa * p.theta * bf + 0.5 * p.beta * p.beta * bf * (bf - 1.0),
                );
            }
            add(a, b, -p.kappa * bf);
        }
    }
    let mut init = DVector::<f64>::zeros(n);
    for b in 0..=MOMENT_DEGREE {
        init[moment_index(0, b)] = p.v0.powi(b as i32);
    }
    let m = (gen * t).exp() * init;
    let raw = [
        m[moment_index(1, 0)],
        m[moment_index(2, 0)],
        m[moment_index(3, 0)],
        m[moment_index(4, 0)],
    ];
    Ok(MomentSet::from_shifted_raw(p.x0, raw))
}

/// `E[exp(i z X_t)]` for complex `z`, from the closed-form solution of the
/// affine Riccati equations.
pub fn heston_characteristic_function(p: &HestonParams, t: f64, z: Complex<f64>) -> Complex<f64> {
    let i = Complex::new(0.0, 1.0);
    let iz = i * z;
    let c = p.convexity();
    let b2 = p.beta * p.beta;
    let k = Complex::new(p.kappa, 0.0) - iz * (p.rho * p.beta);
    if p.beta == 0.0 {
        // B' = −κB + c·iz·(−1) + (iz)²/2 is linear
        let q = iz * iz * 0.5 - iz * c;
        let bt = q * (-(-p.kappa * t).exp_m1()) / p.kappa;
        let at = iz * p.mu * t + q * p.theta * (t - (-(-p.kappa * t).exp_m1()) / p.kappa);
        return (iz * p.x0 + at + bt * p.v0).exp();
    }
    let d = (k * k + (z * z + iz * (2.0 * c)) * b2).sqrt();
    let g = (k - d) / (k + d);
    let e = (-d * t).exp();
    let bt = (k - d) / b2 * (Complex::new(1.0, 0.0) - e) / (Complex::new(1.0, 0.0) - g * e);
    let at = iz * p.mu * t
        + (p.kappa * p.theta / b2)
            * ((k - d) * t
                - 2.0 * ((Complex::new(1.0, 0.0) - g * e) / (Complex::new(1.0, 0.0) - g)).ln());
    (iz * p.x0 + at + bt * p.v0).exp()
}

// 5-point Gauss-Legendre on [-1, 1]
const GL_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];

/// `E[(exp(X_t) − K)^+]` by Fourier inversion of the characteristic function.
pub fn heston_call_price(p: &HestonParams, t: f64, strike: f64) -> Result<f64> {
    p.validate()?;
    if !(t > 0.0) || !(strike > 0.0) {
        return Err(argument("horizon and strike must be positive"));
    }
    let i = Complex::new(0.0, 1.0);
    let lk = strike.ln();
    let forward = heston_characteristic_function(p, t, -i).re;
    let integrand = |u: f64| -> (f64, f64) {
        let uz = Complex::new(u, 0.0);
        let phase = (-i * uz * lk).exp();
        let iu = i * uz;
        let p2 = (phase * heston_characteristic_function(p, t, uz) / iu).re;
        let p1 = (phase * heston_characteristic_function(p, t, uz - i) / (iu * forward)).re;
        (p1, p2)
    };
    let width = 0.25;
    let (mut s1, mut s2) = (0.0, 0.0);
    let mut tail = 0usize;
    let mut k = 0usize;
    while k < 200_000 {
        let lo = k as f64 * width;
        let (mut c1, mut c2) = (0.0, 0.0);
        for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
            let (a, b) = integrand(lo + 0.5 * width * (1.0 + x));
            c1 += w * a;
            c2 += w * b;
        }
        c1 *= 0.5 * width;
        c2 *= 0.5 * width;
        s1 += c1;
        s2 += c2;
        let negligible = c1.abs().max(c2.abs()) < 1e-17;
        tail = if negligible { tail + 1 } else { 0 };
        if tail >= 40 {
            break;
        }
        k += 1;
    }
    let prob1 = 0.5 + s1 / std::f64::consts::PI;
    let prob2 = 0.5 + s2 / std::f64::consts::PI;
    let price = forward * prob1 - strike * prob2;
    if !price.is_finite() {
        return Err(Error::Evaluation(
            "call price integral did not converge".into(),
        ));
    }
    Ok(price.max(0.0))
}

// ---------------------------------------------------------------------------
// Payoffs

/// `(x_k − shift)^power`.
#[derive(Debug, Clone, Copy)]
pub struct ShiftedPower {
    pub component: usize,
    pub shift: f64,
    pub power: i32,
}

impl GenericScalarFunction for ShiftedPower {
    fn apply<S: Scalar>(&self, x: &[S]) -> S {
        (x[self.component] - self.shift).powi(self.power)
    }
}

/// `max(exp(x_k) − K, 0)`.
#[derive(Debug, Clone, Copy)]
pub struct CallPayoff {
    pub component: usize,
    pub strike: f64,
}

impl GenericScalarFunction for CallPayoff {
    fn apply<S: Scalar>(&self, x: &[S]) -> S {
        let v = x[self.component].exp() - self.strike;
        v.clamp_min(0.0)
    }
}

/// `cos(⟨x, e_k⟩)`.
#[derive(Debug, Clone, Copy)]
pub struct CosineOfComponent {
    pub component: usize,
}

impl GenericScalarFunction for CosineOfComponent {
    fn apply<S: Scalar>(&self, x: &[S]) -> S {
        x[self.component].cos()
    }
}

// ---------------------------------------------------------------------------
// Affine models

struct AffineDriftFlow {
    matrix: Vec<Vec<f64>>,
    offset: Vec<f64>,
    diagonal: bool,
}

impl SegmentFlow for AffineDriftFlow {
    fn flow(&self, x: &mut [f64], h: f64) {
        let n = x.len();
        if self.diagonal {
            for k in 0..n {
                let a = self.matrix[k][k];
                let phi = if a == 0.0 { h } else { (a * h).exp_m1() / a };
                x[k] = x[k] * (a * h).exp() + self.offset[k] * phi;
            }
            return;
        }
        // exp of the augmented matrix [[A, b], [0, 0]]
        let mut aug = DMatrix::<f64>::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = self.matrix[i][j] * h;
            }
            aug[(i, n)] = self.offset[i] * h;
        }
        let e = aug.exp();
        let old = x.to_vec();
        for i in 0..n {
            x[i] = (0..n).map(|j| e[(i, j)] * old[j]).sum::<f64>() + e[(i, n)];
        }
    }
}

struct Translation(Vec<f64>);

impl SegmentFlow for Translation {
    fn flow(&self, x: &mut [f64], h: f64) {
        for (xi, s) in x.iter_mut().zip(&self.0) {
            *xi += h * s;
        }
    }
}

/// `dX = (AX + b) dt + Σ_j σ_j dB^j` with constant `σ_j`, so the Itô and
/// Stratonovich forms coincide. Closed-form flows are attached.
pub fn linear_test_model(
    matrix: Vec<Vec<f64>>,
    offset: Vec<f64>,
    sigmas: Vec<Vec<f64>>,
) -> Result<Model> {
    let n = offset.len();
    if n == 0 || matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
        return Err(argument("A must be square with the dimension of b"));
    }
    if sigmas.iter().any(|s| s.len() != n) {
        return Err(argument(
            "every diffusion vector must have the state dimension",
        ));
    }
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || matrix[i][j] == 0.0));
    let mut fields: Vec<Arc<dyn VectorField>> =
        vec![Arc::new(Analytic(crate::vectorfields::AffineField {
            matrix: matrix.clone(),
            offset: offset.clone(),
        }))];
    let mut flows: Vec<Arc<dyn SegmentFlow>> = vec![Arc::new(AffineDriftFlow {
        matrix,
        offset,
        diagonal,
    })];
    for s in sigmas {
        fields.push(Arc::new(Analytic(ConstantField(s.clone()))));
        flows.push(Arc::new(Translation(s)));
    }
    Model::new("linear", n, fields)?.with_exact_flows(flows)
}

/// The one-dimensional Ornstein-Uhlenbeck process `dX = −X dt + dB`.
pub fn ou_model() -> Model {
    linear_test_model(vec![vec![-1.0]], vec![0.0], vec![vec![1.0]]).expect("valid OU parameters")
}

/// Mean and variance of the OU process of [`ou_model`] at time `t`.
pub fn ou_mean_variance(x: f64, t: f64) -> (f64, f64) {
    (x * (-t).exp(), -0.5 * (-2.0 * t).exp_m1())
}

// ---------------------------------------------------------------------------
// Spectral SPDE truncation

/// Saturating noise `σ tanh(⟨x, h⟩) h` along a fixed direction `h`.
#[derive(Debug, Clone)]
pub struct ProjectedTanhNoise {
    pub sigma: f64,
    pub direction: Vec<f64>,
}

impl GenericField for ProjectedTanhNoise {
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        let mut z = S::cst(0.0);
        for (xi, h) in x.iter().zip(&self.direction) {
            z += *xi * *h;
        }
        let g = z.tanh() * self.sigma;
        for (o, h) in out.iter_mut().zip(&self.direction) {
            *o = g * *h;
        }
    }
}

impl SegmentFlow for ProjectedTanhNoise {
    fn flow(&self, x: &mut [f64], a: f64) {
        // z = ⟨x,h⟩ obeys z' = σ|h|² tanh z, so sinh z grows exponentially
        let h2: f64 = self.direction.iter().map(|h| h * h).sum();
        if h2 == 0.0 {
            return;
        }
        let z0: f64 = x.iter().zip(&self.direction).map(|(xi, h)| xi * h).sum();
        let z1 = (z0.sinh() * (self.sigma * h2 * a).exp()).asinh();
        let shift = (z1 - z0) / h2;
        for (xi, h) in x.iter_mut().zip(&self.direction) {
            *xi += shift * h;
        }
    }
}

/// Saturating noise on a single coordinate, `σ tanh(x_k) e_k`.
#[derive(Debug, Clone, Copy)]
pub struct CoordinateTanhNoise {
    pub sigma: f64,
    pub component: usize,
}

impl GenericField for CoordinateTanhNoise {
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        for o in out.iter_mut() {
            *o = S::cst(0.0);
        }
        out[self.component] = x[self.component].tanh() * self.sigma;
    }
}

impl SegmentFlow for CoordinateTanhNoise {
    fn flow(&self, x: &mut [f64], a: f64) {
        let z = x[self.component];
        x[self.component] = (z.sinh() * (self.sigma * a).exp()).asinh();
    }
}

/// Noise options of [`spde_spectral_model`].
#[derive(Debug, Clone)]
pub enum SpdeNoise {
    /// One Brownian motion acting through `σ tanh(⟨x,h⟩) h` with
    /// `h_k ∝ k^{−decay_power}` normalized to unit length; it couples all
    /// modes. Rough directions (small powers) lose convergence order against
    /// the stiff semigroup; a power of 3 keeps `h` in the domain of `A`
    /// uniformly in `K`.
    Projected { sigma: f64, decay_power: f64 },
    /// `d` Brownian motions, the `j`-th acting as `σ_j tanh(x_j) e_j`.
    Coordinate { sigmas: Vec<f64> },
}

struct SemigroupFlow(Vec<f64>);

impl SegmentFlow for SemigroupFlow {
    fn flow(&self, x: &mut [f64], h: f64) {
        for (xi, m) in x.iter_mut().zip(&self.0) {
            *xi *= (m * h).exp();
        }
    }
}

/// `K`-mode truncation `dX = AX dt + Σ_j V_j(X) ∘ dB^j` with
/// `A = diag(μ_1, …, μ_K)`, `V_0 = 0` and bounded saturating noise.
///
/// Exact flows are attached; flow 0 is the semigroup `e^{hA}`.
pub fn spde_spectral_model(decay: &[f64], noise: &SpdeNoise) -> Result<Model> {
    let k = decay.len();
    if k == 0 {
        return Err(argument("the truncation needs at least one mode"));
    }
    if decay.iter().any(|m| !m.is_finite() || *m > 0.0) {
        return Err(argument("eigenvalues must be finite and nonpositive"));
    }
    if decay.windows(2).any(|w| w[1] > w[0]) {
        return Err(argument("eigenvalues must be nonincreasing"));
    }
    let mut fields: Vec<Arc<dyn VectorField>> = vec![Arc::new(Analytic(ZeroField))];
    let mut flows: Vec<Arc<dyn SegmentFlow>> = vec![Arc::new(SemigroupFlow(decay.to_vec()))];
    match noise {
        SpdeNoise::Projected { sigma, decay_power } => {
            if !decay_power.is_finite() {
                return Err(argument("noise decay power must be finite"));
            }
            let raw: Vec<f64> = (1..=k).map(|j| (j as f64).powf(-decay_power)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let field = ProjectedTanhNoise {
                sigma: *sigma,
                direction: raw.iter().map(|v| v / norm).collect(),
            };
            fields.push(Arc::new(Analytic(field.clone())));
            flows.push(Arc::new(field));
        }
        SpdeNoise::Coordinate { sigmas } => {
            if sigmas.is_empty() || sigmas.len() > k {
                return Err(argument(
                    "need between 1 and K coordinate noise intensities",
                ));
            }
            for (j, s) in sigmas.iter().enumerate() {
                let field = CoordinateTanhNoise {
                    sigma: *s,
                    component: j,
                };
                fields.push(Arc::new(Analytic(field)));
                flows.push(Arc::new(field));
            }
        }
    }
    Model::new("spde", k, fields)?
        .with_linear(LinearPart::Diagonal(decay.to_vec()))?
        .with_exact_flows(flows)
}

/// Eigenvalues `μ_k = −k²` of the Dirichlet Laplacian on `(0, π)`.
pub fn laplacian_eigenvalues(k: usize) -> Vec<f64> {
    (1..=k).map(|j| -((j * j) as f64)).collect()
}
