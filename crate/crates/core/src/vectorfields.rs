//! Vector fields, Lie derivatives and the generator of a Stratonovich model.
//!
//! A [`Model`] carries the Stratonovich fields `V_0, ..., V_d` (index 0 is
//! the drift), an optional linear part `A` and optional closed-form
//! single-field flows. Derivatives along fields are taken exactly with
//! [`Jet`] arithmetic when both the field and the function support it, and
//! by central finite differences otherwise.

use std::fmt;
use std::sync::Arc;

use crate::error::{argument, Error, Result};
use crate::jet::{Jet, Scalar, MAX_NESTING};

/// A map `R^N → R^N`.
pub trait VectorField: Send + Sync {
    fn eval(&self, x: &[f64], out: &mut [f64]);

    /// Evaluates on jet arguments. Returns `false` when unsupported, in
    /// which case derivatives fall back to finite differences.
    fn eval_jet(&self, _x: &[Jet], _out: &mut [Jet]) -> bool {
        false
    }
}

/// A vector field written once for every [`Scalar`].
pub trait GenericField: Send + Sync {
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]);
}

/// A scalar function `R^N → R`.
pub trait ScalarFunction: Send + Sync {
    fn eval(&self, x: &[f64]) -> f64;

    fn eval_jet(&self, _x: &[Jet]) -> Option<Jet> {
        None
    }
}

/// A scalar function written once for every [`Scalar`].
pub trait GenericScalarFunction: Send + Sync {
    fn apply<S: Scalar>(&self, x: &[S]) -> S;
}

/// Adapter giving a generic field or function exact derivatives.
#[derive(Debug, Clone, Copy)]
pub struct Analytic<F>(pub F);

impl<F: GenericField> VectorField for Analytic<F> {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.0.apply(x, out)
    }

    fn eval_jet(&self, x: &[Jet], out: &mut [Jet]) -> bool {
        self.0.apply(x, out);
        true
    }
}

impl<F: GenericScalarFunction> ScalarFunction for Analytic<F> {
    fn eval(&self, x: &[f64]) -> f64 {
        self.0.apply(x)
    }

    fn eval_jet(&self, x: &[Jet]) -> Option<Jet> {
        Some(self.0.apply(x))
    }
}

/// Closure-backed field without jet support.
pub struct FnField<F>(pub F);

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.0)(x, out)
    }
}

/// Closure-backed scalar function without jet support.
pub struct FnScalar<F>(pub F);

impl<F> ScalarFunction for FnScalar<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// The identically zero field.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField;

impl GenericField for ZeroField {
    fn apply<S: Scalar>(&self, _x: &[S], out: &mut [S]) {
        for o in out.iter_mut() {
            *o = S::cst(0.0);
        }
    }
}

/// A constant field.
#[derive(Debug, Clone)]
pub struct ConstantField(pub Vec<f64>);

impl GenericField for ConstantField {
    fn apply<S: Scalar>(&self, _x: &[S], out: &mut [S]) {
        for (o, v) in out.iter_mut().zip(&self.0) {
            *o = S::cst(*v);
        }
    }
}

/// The affine field `x ↦ Mx + b`.
#[derive(Debug, Clone)]
pub struct AffineField {
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl GenericField for AffineField {
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = S::cst(self.offset[i]);
            for (m, xj) in self.matrix[i].iter().zip(x) {
                if *m != 0.0 {
                    acc += *xj * *m;
                }
            }
            *o = acc;
        }
    }
}

/// Linear part `A` of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearPart {
    /// `A = diag(μ_1, ..., μ_N)`.
    Diagonal(Vec<f64>),
    /// A general matrix; only usable by the generator, not by the mild flow.
    Dense(Vec<Vec<f64>>),
}

impl LinearPart {
    pub fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        match self {
            LinearPart::Diagonal(mu) => {
                for ((o, m), xi) in out.iter_mut().zip(mu).zip(x) {
                    *o = *xi * *m;
                }
            }
            LinearPart::Dense(a) => {
                for (o, row) in out.iter_mut().zip(a) {
                    let mut acc = S::cst(0.0);
                    for (m, xj) in row.iter().zip(x) {
                        acc += *xj * *m;
                    }
                    *o = acc;
                }
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            LinearPart::Diagonal(mu) => mu.len(),
            LinearPart::Dense(a) => a.len(),
        }
    }
}

/// Closed-form flow of a single field: `x ← Φ^h(x)`.
pub trait SegmentFlow: Send + Sync {
    fn flow(&self, x: &mut [f64], h: f64);
}

/// A Stratonovich model `dX = AX dt + Σ_j V_j(X) ∘ dω^j`.
#[derive(Clone)]
pub struct Model {
    name: String,
    dim: usize,
    fields: Vec<Arc<dyn VectorField>>,
    linear: Option<LinearPart>,
    exact_flows: Option<Vec<Arc<dyn SegmentFlow>>>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("brownian_dim", &self.brownian_dim())
            .field("linear", &self.linear)
            .field("exact_flows", &self.exact_flows.is_some())
            .finish()
    }
}

impl Model {
    /// `fields[0]` is the Stratonovich drift, `fields[1..]` the diffusion fields.
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        fields: Vec<Arc<dyn VectorField>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(argument("model dimension must be positive"));
        }
        if fields.is_empty() {
            return Err(argument("a model needs at least the drift field V_0"));
        }
        Ok(Model {
            name: name.into(),
            dim,
            fields,
            linear: None,
            exact_flows: None,
        })
    }

    pub fn with_linear(mut self, linear: LinearPart) -> Result<Self> {
        if linear.dim() != self.dim {
            return Err(argument(format!(
                "linear part has dimension {}, model has {}",
                linear.dim(),
                self.dim
            )));
        }
        self.linear = Some(linear);
        Ok(self)
    }

    pub fn with_exact_flows(mut self, flows: Vec<Arc<dyn SegmentFlow>>) -> Result<Self> {
        if flows.len() != self.fields.len() {
            return Err(argument(format!(
                "{} exact flows supplied for {} fields",
                flows.len(),
                self.fields.len()
            )));
        }
        self.exact_flows = Some(flows);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// State dimension `N`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of Brownian directions `d`.
    pub fn brownian_dim(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn field(&self, j: usize) -> &dyn VectorField {
        self.fields[j].as_ref()
    }

    pub fn fields(&self) -> &[Arc<dyn VectorField>] {
        &self.fields
    }

    pub fn linear(&self) -> Option<&LinearPart> {
        self.linear.as_ref()
    }

    pub fn exact_flows(&self) -> Option<&[Arc<dyn SegmentFlow>]> {
        self.exact_flows.as_deref()
    }

    /// The field `β_0(x) = Ax + V_0(x)` that plays the role of index 0 in
    /// Taylor expansions.
    pub fn drift_with_linear(&self) -> Arc<dyn VectorField> {
        match &self.linear {
            None => self.fields[0].clone(),
            Some(a) => Arc::new(LinearPlusField {
                linear: a.clone(),
                field: self.fields[0].clone(),
            }),
        }
    }

    /// Checks `Φ^0 = id` and `Φ^h ∘ Φ^{h'} = Φ^{h+h'}` for every attached
    /// exact flow on the given points, to `tol` relative.
    pub fn check_semiflows(
        &self,
        points: &[Vec<f64>],
        steps: &[(f64, f64)],
        tol: f64,
    ) -> Result<()> {
        let Some(flows) = &self.exact_flows else {
            return Ok(());
        };
        for (j, flow) in flows.iter().enumerate() {
            for p in points {
                let mut x = p.clone();
                flow.flow(&mut x, 0.0);
                if !close(&x, p, tol) {
                    return Err(Error::Evaluation(format!(
                        "flow {j} is not the identity at h=0 for {p:?}"
                    )));
                }
                for &(h1, h2) in steps {
                    let mut a = p.clone();
                    flow.flow(&mut a, h1);
                    flow.flow(&mut a, h2);
                    let mut b = p.clone();
                    flow.flow(&mut b, h1 + h2);
                    if !close(&a, &b, tol) {
                        return Err(Error::Evaluation(format!(
                            "flow {j} violates the semiflow property at {p:?} for steps ({h1}, {h2})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

struct LinearPlusField {
    linear: LinearPart,
    field: Arc<dyn VectorField>,
}

impl VectorField for LinearPlusField {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.field.eval(x, out);
        let mut ax = vec![0.0; x.len()];
        self.linear.apply(x, &mut ax);
        for (o, a) in out.iter_mut().zip(ax) {
            *o += a;
        }
    }

    fn eval_jet(&self, x: &[Jet], out: &mut [Jet]) -> bool {
        if !self.field.eval_jet(x, out) {
            return false;
        }
        let mut ax = vec![Jet::constant(0.0); x.len()];
        self.linear.apply(x, &mut ax);
        for (o, a) in out.iter_mut().zip(ax) {
            *o += a;
        }
        true
    }
}

/// Stratonovich drift `V_0 = b - ½ Σ_j (DV_j) V_j` from an Itô drift `b`.
///
/// The correction uses exact directional derivatives when the diffusion
/// fields support jets, central differences otherwise. The resulting field
/// is evaluated in `f64` only.
pub struct ItoDriftConversion {
    ito_drift: Arc<dyn VectorField>,
    diffusion: Vec<Arc<dyn VectorField>>,
}

impl ItoDriftConversion {
    pub fn new(ito_drift: Arc<dyn VectorField>, diffusion: Vec<Arc<dyn VectorField>>) -> Self {
        ItoDriftConversion {
            ito_drift,
            diffusion,
        }
    }
}

impl VectorField for ItoDriftConversion {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.ito_drift.eval(x, out);
        let n = x.len();
        let mut v = vec![0.0; n];
        for field in &self.diffusion {
            field.eval(x, &mut v);
            let jv = directional_derivative_of_field(field.as_ref(), x, &v);
            for (o, c) in out.iter_mut().zip(jv) {
                *o -= 0.5 * c;
            }
        }
    }
}

/// `DV(x) w`.
fn directional_derivative_of_field(field: &dyn VectorField, x: &[f64], w: &[f64]) -> Vec<f64> {
    let n = x.len();
    let e = Jet::infinitesimal(0);
    let y: Vec<Jet> = x.iter().zip(w).map(|(a, b)| e * *b + *a).collect();
    let mut out = vec![Jet::constant(0.0); n];
    if field.eval_jet(&y, &mut out) {
        return out.iter().map(|j| j.coeff(1)).collect();
    }
    let h = fd_step(1) * (1.0 + norm(x));
    let plus: Vec<f64> = x.iter().zip(w).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x.iter().zip(w).map(|(a, b)| a - h * b).collect();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    field.eval(&plus, &mut fp);
    field.eval(&minus, &mut fm);
    fp.iter()
        .zip(&fm)
        .map(|(p, m)| (p - m) / (2.0 * h))
        .collect()
}

/// A multi-index `(i_1, ..., i_k)` with entries in `{0, ..., d}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(entries: Vec<usize>) -> Self {
        MultiIndex(entries)
    }

    pub fn empty() -> Self {
        MultiIndex(Vec::new())
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `k + #{j : i_j = 0}`: time indices count twice.
    pub fn degree(&self) -> usize {
        self.0.len() + self.0.iter().filter(|&&i| i == 0).count()
    }

    /// All multi-indices over `{0..=d}` with degree at most `max_degree`,
    /// ordered by length, then lexicographically.
    pub fn enumerate(d: usize, max_degree: usize) -> Vec<MultiIndex> {
        let mut out = vec![MultiIndex::empty()];
        let mut frontier = vec![MultiIndex::empty()];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for alpha in &frontier {
                for i in 0..=d {
                    let mut e = alpha.0.clone();
                    e.push(i);
                    let beta = MultiIndex(e);
                    if beta.degree() <= max_degree {
                        next.push(beta);
                    }
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, ")")
    }
}

/// How derivatives along fields are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DerivativeMode {
    /// Exact when every participant supports jets, finite differences otherwise.
    #[default]
    Auto,
    FiniteDifference,
    /// Exact or an error.
    Exact,
}

/// Result of a nested derivative evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeEstimate {
    pub value: f64,
    /// Computed with jets rather than finite differences.
    pub exact: bool,
    /// Finite differences nested more than [`MAX_NESTING`] deep.
    pub unstable: bool,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Relative step for `depth` nested central differences: `ε^{1/3}` for a
/// single level, `ε^{1/(depth+2)}` when nested.
fn fd_step(depth: usize) -> f64 {
    let p = if depth <= 1 { 3.0 } else { depth as f64 + 2.0 };
    f64::EPSILON.powf(1.0 / p)
}

/// `W_1(W_2(…(W_L f)))(x)`; `W_L` acts on `f` first.
pub fn nested_lie_derivative(
    fields: &[&dyn VectorField],
    f: &dyn ScalarFunction,
    x: &[f64],
    mode: DerivativeMode,
) -> Result<DerivativeEstimate> {
    let fx = f.eval(x);
    if !fx.is_finite() {
        return Err(Error::Evaluation(format!(
            "function is not finite at {x:?}"
        )));
    }
    if fields.is_empty() {
        return Ok(DerivativeEstimate {
            value: fx,
            exact: true,
            unstable: false,
        });
    }
    if mode != DerivativeMode::FiniteDifference {
        if let Some(v) = nested_exact(fields, f, x) {
            if !v.is_finite() {
                return Err(Error::Evaluation(format!(
                    "derivative is not finite at {x:?}"
                )));
            }
            return Ok(DerivativeEstimate {
                value: v,
                exact: true,
                unstable: false,
            });
        }
        if mode == DerivativeMode::Exact {
            return Err(Error::Method(
                "exact derivatives requested but a field or the function lacks jet support, \
                 or the nesting is too deep"
                    .into(),
            ));
        }
    }
    let depth = fields.len();
    let h = fd_step(depth) * (1.0 + norm(x));
    let v = nested_fd(fields, f, x, h);
    if !v.is_finite() {
        return Err(Error::Evaluation(format!(
            "finite-difference derivative is not finite at {x:?}"
        )));
    }
    Ok(DerivativeEstimate {
        value: v,
        exact: false,
        unstable: depth > MAX_NESTING,
    })
}

fn nested_exact(fields: &[&dyn VectorField], f: &dyn ScalarFunction, x: &[f64]) -> Option<f64> {
    if fields.len() > MAX_NESTING {
        return None;
    }
    let n = x.len();
    let mut y: Vec<Jet> = x.iter().map(|&v| Jet::constant(v)).collect();
    let mut w = vec![Jet::constant(0.0); n];
    for (r, field) in fields.iter().enumerate() {
        if !field.eval_jet(&y, &mut w) {
            return None;
        }
        let e = Jet::infinitesimal(r);
        for (yi, wi) in y.iter_mut().zip(&w) {
            *yi += *wi * e;
        }
    }
    let value = f.eval_jet(&y)?;
    Some(value.coeff((1 << fields.len()) - 1))
}

fn nested_fd(fields: &[&dyn VectorField], f: &dyn ScalarFunction, x: &[f64], h: f64) -> f64 {
    match fields.split_first() {
        None => f.eval(x),
        Some((outer, rest)) => {
            let mut w = vec![0.0; x.len()];
            outer.eval(x, &mut w);
            let plus: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a - h * b).collect();
            (nested_fd(rest, f, &plus, h) - nested_fd(rest, f, &minus, h)) / (2.0 * h)
        }
    }
}

/// `L_V f(x) = Df(x) V(x)`.
pub fn lie_derivative(
    field: &dyn VectorField,
    f: &dyn ScalarFunction,
    x: &[f64],
    mode: DerivativeMode,
) -> Result<f64> {
    Ok(nested_lie_derivative(&[field], f, x, mode)?.value)
}

/// Terms of the generator `G = β_0 + ½ Σ_j V_j V_j` as weighted field words.
fn generator_terms(model: &Model) -> (Arc<dyn VectorField>, Vec<(f64, Vec<usize>)>) {
    let beta0 = model.drift_with_linear();
    let mut terms = vec![(1.0, vec![0usize])];
    for j in 1..=model.brownian_dim() {
        terms.push((0.5, vec![j, j]));
    }
    (beta0, terms)
}

/// `Gf(x) = Df(x)(Ax) + L_{V_0} f(x) + ½ Σ_j L_{V_j}² f(x)`.
pub fn apply_generator(
    model: &Model,
    f: &dyn ScalarFunction,
    x: &[f64],
    mode: DerivativeMode,
) -> Result<f64> {
    generator_power(model, f, x, 1, mode).map(|e| e.value)
}

/// `G^j f(x)`, expanded into nested Lie derivatives.
pub fn generator_power(
    model: &Model,
    f: &dyn ScalarFunction,
    x: &[f64],
    power: usize,
    mode: DerivativeMode,
) -> Result<DerivativeEstimate> {
    let (beta0, terms) = generator_terms(model);
    let resolve = |i: usize| -> &dyn VectorField {
        if i == 0 {
            beta0.as_ref()
        } else {
            model.field(i)
        }
    };
    let mut total = DerivativeEstimate {
        value: 0.0,
        exact: true,
        unstable: false,
    };
    if power == 0 {
        return nested_lie_derivative(&[], f, x, mode);
    }
    // iterate over all sequences of `power` terms
    let mut choice = vec![0usize; power];
    loop {
        let mut coef = 1.0;
        let mut word: Vec<&dyn VectorField> = Vec::new();
        for &c in &choice {
            coef *= terms[c].0;
            word.extend(terms[c].1.iter().map(|&i| resolve(i)));
        }
        let est = nested_lie_derivative(&word, f, x, mode)?;
        total.value += coef * est.value;
        total.exact &= est.exact;
        total.unstable |= est.unstable;
        // next sequence
        let mut k = 0;
        loop {
            if k == power {
                return Ok(total);
            }
            choice[k] += 1;
            if choice[k] < terms.len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

/// `V_{i_1}(V_{i_2}(…(V_{i_k} f)))(x)` with index 0 meaning `β_0 = A x + V_0`.
pub fn iterated_vector_fields(
    model: &Model,
    alpha: &MultiIndex,
    f: &dyn ScalarFunction,
    x: &[f64],
    mode: DerivativeMode,
) -> Result<DerivativeEstimate> {
    let d = model.brownian_dim();
    if let Some(&bad) = alpha.entries().iter().find(|&&i| i > d) {
        return Err(argument(format!("multi-index entry {bad} exceeds d = {d}")));
    }
    let beta0 = model.drift_with_linear();
    let word: Vec<&dyn VectorField> = alpha
        .entries()
        .iter()
        .map(|&i| {
            if i == 0 {
                beta0.as_ref()
            } else {
                model.field(i)
            }
        })
        .collect();
    nested_lie_derivative(&word, f, x, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;
    impl GenericScalarFunction for Quadratic {
        fn apply<S: Scalar>(&self, x: &[S]) -> S {
            x.iter().fold(S::cst(0.0), |acc, v| acc + *v * *v)
        }
    }

    struct FirstSquared;
    impl GenericScalarFunction for FirstSquared {
        fn apply<S: Scalar>(&self, x: &[S]) -> S {
            x[0] * x[0]
        }
    }

    struct Linear(Vec<f64>);
    impl GenericScalarFunction for Linear {
        fn apply<S: Scalar>(&self, x: &[S]) -> S {
            x.iter()
                .zip(&self.0)
                .fold(S::cst(0.0), |acc, (a, w)| acc + *a * *w)
        }
    }

    struct Identity;
    impl GenericField for Identity {
        fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
            out.copy_from_slice(x);
        }
    }

    /// Quartic with mixed terms.
    struct Quartic;
    impl GenericScalarFunction for Quartic {
        fn apply<S: Scalar>(&self, x: &[S]) -> S {
            x[0].powi(4) * 0.3 + x[0] * x[1] * x[1] - x[1].powi(3) * 2.0 + x[0] * 0.5 + 1.0
        }
    }

    struct Rotation;
    impl GenericField for Rotation {
        fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
            out[0] = -x[1] + x[0] * x[0] * 0.1;
            out[1] = x[0];
        }
    }

    fn both_modes(field: &dyn VectorField, f: &dyn ScalarFunction, x: &[f64]) -> (f64, f64) {
        (
            lie_derivative(field, f, x, DerivativeMode::Exact).unwrap(),
            lie_derivative(field, f, x, DerivativeMode::FiniteDifference).unwrap(),
        )
    }

    #[test]
    fn lie_derivative_examples() {
        let f = Analytic(Quadratic);
        let zero = Analytic(ZeroField);
        let (e, d) = both_modes(&zero, &f, &[1.0, 2.0]);
        assert_eq!(e, 0.0);
        assert_eq!(d, 0.0);

        let w = vec![0.5, -2.0];
        let v = Analytic(ConstantField(vec![3.0, 1.0]));
        let (e, d) = both_modes(&v, &Analytic(Linear(w)), &[0.2, 0.7]);
        assert!((e - (1.5 - 2.0)).abs() < 1e-15);
        assert!((d - (1.5 - 2.0)).abs() < 1e-9);

        let (e, d) = both_modes(&Analytic(Identity), &f, &[1.0, 2.0]);
        assert!((e - 10.0).abs() < 1e-14);
        assert!((d - 10.0).abs() < 1e-8);
    }

    #[test]
    fn finite_differences_track_exact_on_quartics() {
        let f = Analytic(Quartic);
        let v = Analytic(Rotation);
        for x in [[0.3, -0.4], [1.5, 2.0], [-2.0, 0.7]] {
            let (e, d) = both_modes(&v, &f, &x);
            assert!((e - d).abs() <= 1e-6 * e.abs().max(1.0), "{e} vs {d}");
        }
    }

    #[test]
    fn nan_is_an_evaluation_error() {
        let f = FnScalar(|_x: &[f64]| f64::NAN);
        let v = Analytic(ConstantField(vec![1.0]));
        assert!(matches!(
            lie_derivative(&v, &f, &[0.0], DerivativeMode::Auto),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn exact_mode_refuses_closures() {
        let f = FnScalar(|x: &[f64]| x[0]);
        let v = Analytic(ConstantField(vec![1.0]));
        assert!(matches!(
            lie_derivative(&v, &f, &[0.0], DerivativeMode::Exact),
            Err(Error::Method(_))
        ));
        // Auto falls back
        let fd = lie_derivative(&v, &f, &[0.0], DerivativeMode::Auto).unwrap();
        assert!((fd - 1.0).abs() < 1e-9);
    }

    fn model_1d(v0: Arc<dyn VectorField>, v1: Arc<dyn VectorField>, dim: usize) -> Model {
        Model::new("test", dim, vec![v0, v1]).unwrap()
    }

    #[test]
    fn generator_examples() {
        // constant f
        let m = model_1d(
            Arc::new(Analytic(Identity)),
            Arc::new(Analytic(Identity)),
            2,
        );
        let c = Analytic(Linear(vec![0.0, 0.0]));
        assert_eq!(
            apply_generator(&m, &c, &[0.4, 0.1], DerivativeMode::Exact).unwrap(),
            0.0
        );

        // ½ ∂²(x₁²) = 1
        let m = model_1d(
            Arc::new(Analytic(ZeroField)),
            Arc::new(Analytic(ConstantField(vec![1.0, 0.0]))),
            2,
        );
        let g = apply_generator(
            &m,
            &Analytic(FirstSquared),
            &[0.4, 0.1],
            DerivativeMode::Exact,
        )
        .unwrap();
        assert!((g - 1.0).abs() < 1e-14);
        let g = apply_generator(
            &m,
            &Analytic(FirstSquared),
            &[0.4, 0.1],
            DerivativeMode::FiniteDifference,
        )
        .unwrap();
        assert!((g - 1.0).abs() < 1e-6);

        // drift-only transport
        let m = model_1d(
            Arc::new(Analytic(ConstantField(vec![2.0, -1.0]))),
            Arc::new(Analytic(ZeroField)),
            2,
        );
        let g = apply_generator(
            &m,
            &Analytic(Linear(vec![1.0, 3.0])),
            &[0.0, 0.0],
            DerivativeMode::Auto,
        )
        .unwrap();
        assert!((g - (2.0 - 3.0)).abs() < 1e-14);
    }

    #[test]
    fn generator_includes_linear_part() {
        // A = diag(-1, -2), no fields: Gf = Df(x)(Ax); f = x1 + x2 → -x1 - 2 x2
        let m = Model::new(
            "lin",
            2,
            vec![Arc::new(Analytic(ZeroField)) as Arc<dyn VectorField>],
        )
        .unwrap()
        .with_linear(LinearPart::Diagonal(vec![-1.0, -2.0]))
        .unwrap();
        let g = apply_generator(
            &m,
            &Analytic(Linear(vec![1.0, 1.0])),
            &[1.0, 1.0],
            DerivativeMode::Exact,
        )
        .unwrap();
        assert!((g + 3.0).abs() < 1e-14);
    }

    #[test]
    fn generator_closed_form_for_linear_fields_and_quadratic_f() {
        // V0 = M x, V1 = c, f = |x|²: Gf = 2 x·Mx + |c|²
        let mat = vec![vec![-1.0, 0.5], vec![0.2, -0.3]];
        let v0 = AffineField {
            matrix: mat.clone(),
            offset: vec![0.0, 0.0],
        };
        let m = model_1d(
            Arc::new(Analytic(v0)),
            Arc::new(Analytic(ConstantField(vec![0.7, -1.1]))),
            2,
        );
        let x = [0.9, -0.4];
        let mx = [
            mat[0][0] * x[0] + mat[0][1] * x[1],
            mat[1][0] * x[0] + mat[1][1] * x[1],
        ];
        let expected = 2.0 * (x[0] * mx[0] + x[1] * mx[1]) + 0.49 + 1.21;
        for mode in [DerivativeMode::Exact, DerivativeMode::FiniteDifference] {
            let g = apply_generator(&m, &Analytic(Quadratic), &x, mode).unwrap();
            assert!((g - expected).abs() < 1e-6, "{mode:?}: {g}");
        }
        let g = apply_generator(&m, &Analytic(Quadratic), &x, DerivativeMode::Exact).unwrap();
        assert!((g - expected).abs() < 1e-9);
    }

    #[test]
    fn generator_is_linear_in_f() {
        let m = model_1d(
            Arc::new(Analytic(Rotation)),
            Arc::new(Analytic(Identity)),
            2,
        );
        let x = [0.6, -0.2];
        let (a, b) = (1.7, -0.3);
        let fa = Analytic(Quartic);
        let fb = Analytic(Quadratic);
        let combo = FnScalar(|y: &[f64]| a * Quartic.apply(y) + b * Quadratic.apply(y));
        let lhs = apply_generator(&m, &combo, &x, DerivativeMode::FiniteDifference).unwrap();
        let ga = apply_generator(&m, &fa, &x, DerivativeMode::Exact).unwrap();
        let gb = apply_generator(&m, &fb, &x, DerivativeMode::Exact).unwrap();
        assert!((lhs - a * ga - b * gb).abs() < 1e-5);
        // exact path: linear to roundoff
        struct Combo(f64, f64);
        impl GenericScalarFunction for Combo {
            fn apply<S: Scalar>(&self, y: &[S]) -> S {
                Quartic.apply(y) * self.0 + Quadratic.apply(y) * self.1
            }
        }
        let exact = apply_generator(&m, &Analytic(Combo(a, b)), &x, DerivativeMode::Exact).unwrap();
        let scale = a.abs() * Quartic.apply(&x).abs() + b.abs() * Quadratic.apply(&x).abs();
        assert!((exact - a * ga - b * gb).abs() <= 1e-9 * scale.max(1.0));
    }

    #[test]
    fn iterated_examples() {
        let m = model_1d(
            Arc::new(Analytic(ZeroField)),
            Arc::new(Analytic(ConstantField(vec![1.0, 0.0]))),
            2,
        );
        let f = Analytic(FirstSquared);
        let x = [0.3, 2.0];
        let v = iterated_vector_fields(&m, &MultiIndex::empty(), &f, &x, DerivativeMode::Exact)
            .unwrap();
        assert!((v.value - 0.09).abs() < 1e-15);
        let v = iterated_vector_fields(
            &m,
            &MultiIndex::new(vec![1, 1]),
            &f,
            &x,
            DerivativeMode::Exact,
        )
        .unwrap();
        assert!((v.value - 2.0).abs() < 1e-14);
        let lin = Analytic(Linear(vec![2.0, 5.0]));
        let v = iterated_vector_fields(
            &m,
            &MultiIndex::new(vec![1]),
            &lin,
            &x,
            DerivativeMode::Auto,
        )
        .unwrap();
        assert!((v.value - 2.0).abs() < 1e-14);
        assert!(iterated_vector_fields(
            &m,
            &MultiIndex::new(vec![2]),
            &lin,
            &x,
            DerivativeMode::Auto
        )
        .is_err());
    }

    #[test]
    fn deep_finite_differences_are_flagged() {
        let m = model_1d(
            Arc::new(Analytic(ZeroField)),
            Arc::new(Analytic(Identity)),
            1,
        );
        let f = FnScalar(|x: &[f64]| x[0].exp());
        let est = iterated_vector_fields(
            &m,
            &MultiIndex::new(vec![1; 5]),
            &f,
            &[0.1],
            DerivativeMode::Auto,
        )
        .unwrap();
        assert!(est.unstable && !est.exact);
        let est = iterated_vector_fields(
            &m,
            &MultiIndex::new(vec![1; 2]),
            &f,
            &[0.1],
            DerivativeMode::Auto,
        )
        .unwrap();
        assert!(!est.unstable);
    }

    #[test]
    fn generator_squared_matches_closed_form_for_ou() {
        // OU: V0 = -x, V1 = 1; f = x^4
        // Gf = -4x^4 + 6x^2, G²f = 16x^4 - 48x^2 + 12 - 12x^2... computed by hand:
        // G(x^4) = -4x^4 + 6x^2; G(x^2) = -2x^2 + 1
        // G²(x^4) = -4(-4x^4 + 6x^2) + 6(-2x^2 + 1) = 16x^4 - 36x^2 + 6
        let m = model_1d(
            Arc::new(Analytic(AffineField {
                matrix: vec![vec![-1.0]],
                offset: vec![0.0],
            })),
            Arc::new(Analytic(ConstantField(vec![1.0]))),
            1,
        );
        struct X4;
        impl GenericScalarFunction for X4 {
            fn apply<S: Scalar>(&self, x: &[S]) -> S {
                x[0].powi(4)
            }
        }
        let x = 0.8f64;
        let g2 = generator_power(&m, &Analytic(X4), &[x], 2, DerivativeMode::Exact).unwrap();
        assert!(g2.exact);
        let expected = 16.0 * x.powi(4) - 36.0 * x * x + 6.0;
        assert!((g2.value - expected).abs() < 1e-12);
    }

    #[test]
    fn enumeration_order_and_degrees() {
        let all = MultiIndex::enumerate(1, 2);
        let shown: Vec<String> = all.iter().map(|a| a.to_string()).collect();
        assert_eq!(shown, vec!["()", "(0)", "(1)", "(1,1)"]);
        assert_eq!(MultiIndex::new(vec![0, 1, 0]).degree(), 5);
        assert_eq!(MultiIndex::empty().degree(), 0);
        // counts by exact degree follow c(n) = 2c(n-1) + c(n-2) for d = 2
        let all = MultiIndex::enumerate(2, 5);
        let by_degree: Vec<usize> = (0..=5)
            .map(|n| all.iter().filter(|a| a.degree() == n).count())
            .collect();
        assert_eq!(by_degree, vec![1, 2, 5, 12, 29, 70]);
    }

    #[test]
    fn ito_conversion_matches_hand_correction() {
        // V1(x) = x (geometric): Stratonovich drift = b - x/2
        let b = Arc::new(Analytic(ConstantField(vec![0.3]))) as Arc<dyn VectorField>;
        let v1 = Arc::new(Analytic(Identity)) as Arc<dyn VectorField>;
        let conv = ItoDriftConversion::new(b, vec![v1]);
        let mut out = [0.0];
        conv.eval(&[2.0], &mut out);
        assert!((out[0] - (0.3 - 1.0)).abs() < 1e-15);
    }
}
