//! Radial weight functions and weighted sup-norms over finite point clouds.
//!
//! Two families are provided, both radial, increasing in `‖x‖` and bounded
//! below by 1:
//!
//! * polynomial weights `ψ(x) = (1 + ‖x‖²)^{s/2}`, `s ≥ 1`;
//! * hyperbolic weights `ψ(x) = cosh(α‖x‖)`, `α > 0`, which grow
//!   exponentially and pair with bounded vector fields.
//!
//! Suprema are always taken over an explicit list of points.

use crate::error::{argument, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightKind {
    Polynomial { s: f64 },
    Cosh { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightFunction {
    kind: WeightKind,
}

/// Constants fitted by [`WeightFunction::derivative_bounds`].
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBoundReport {
    /// Smallest `C₁` with `‖Dψ(x)‖ (1+‖x‖²)^{1/2} ≤ C₁ ψ(x)` on the cloud.
    pub c1: f64,
    /// Smallest `C₂` with `‖D²ψ(x)‖ (1+‖x‖²) ≤ C₂ ψ(x)` on the cloud.
    pub c2: f64,
    /// `max ‖Dψ(x)‖ / ψ(x)` on the cloud.
    pub gradient_ratio: f64,
    /// `max (‖Dψ(x)‖ + ‖D²ψ(x)‖) / ψ(x)` on the cloud.
    pub bounded_field_constant: f64,
    /// The polynomial-decay bound grows without limit for this weight; the
    /// stability estimates then rely on `‖Dψ‖ + ‖D²ψ‖ ≤ Cψ` together with
    /// bounded vector fields.
    pub requires_bounded_fields: bool,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite point {x:?}")))
    }
}

impl WeightFunction {
    pub fn polynomial(s: f64) -> Result<Self> {
        if !(s.is_finite() && s >= 1.0) {
            return Err(argument(format!(
                "polynomial weight exponent must be >= 1, got {s}"
            )));
        }
        Ok(WeightFunction {
            kind: WeightKind::Polynomial { s },
        })
    }

    pub fn cosh(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(argument(format!(
                "cosh weight rate must be > 0, got {alpha}"
            )));
        }
        Ok(WeightFunction {
            kind: WeightKind::Cosh { alpha },
        })
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    /// Lower bound `δ` of the weight.
    pub fn lower_bound(&self) -> f64 {
        1.0
    }

    /// Whether ratio comparisons should go through [`Self::eval_log`].
    pub fn prefers_log_domain(&self) -> bool {
        matches!(self.kind, WeightKind::Cosh { .. })
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_finite(x)?;
        Ok(self.eval_radial(norm(x)))
    }

    fn eval_radial(&self, r: f64) -> f64 {
        match self.kind {
            WeightKind::Polynomial { s } => (1.0 + r * r).powf(0.5 * s),
            WeightKind::Cosh { alpha } => (alpha * r).cosh(),
        }
    }

    /// `log ψ(x)`, finite wherever `x` is.
    pub fn eval_log(&self, x: &[f64]) -> Result<f64> {
        check_finite(x)?;
        Ok(self.eval_log_radial(norm(x)))
    }

    fn eval_log_radial(&self, r: f64) -> f64 {
        match self.kind {
            WeightKind::Polynomial { s } => 0.5 * s * (r * r).ln_1p(),
            WeightKind::Cosh { alpha } => {
                let a = alpha * r;
                // log cosh a = a + log(1 + e^{-2a}) - log 2
                a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
            }
        }
    }

    /// `‖Dψ(x)‖ / ψ(x)` and `‖D²ψ(x)‖ / ψ(x)` (operator norm), computed
    /// analytically from the radial profile.
    pub fn derivative_ratios(&self, x: &[f64]) -> Result<(f64, f64)> {
        check_finite(x)?;
        let r = norm(x);
        let n = x.len();
        Ok(match self.kind {
            WeightKind::Polynomial { s } => {
                let q = 1.0 + r * r;
                // g'/g = s r / q, g''/g = s (1 + (s-1) r²) / q², (g'/r)/g = s / q
                let grad = s * r / q;
                let radial = s * (1.0 + (s - 1.0) * r * r) / (q * q);
                let tangential = s / q;
                let hess = if n > 1 {
                    radial.abs().max(tangential)
                } else {
                    radial.abs()
                };
                (grad, hess)
            }
            WeightKind::Cosh { alpha } => {
                let a = alpha * r;
                let grad = alpha * a.tanh();
                let radial = alpha * alpha;
                let tangential = if r > 0.0 {
                    alpha * a.tanh() / r
                } else {
                    alpha * alpha
                };
                let hess = if n > 1 {
                    radial.max(tangential)
                } else {
                    radial
                };
                (grad, hess)
            }
        })
    }

    /// Fits the derivative-bound constants over a point cloud.
    pub fn derivative_bounds(&self, cloud: &[Vec<f64>]) -> Result<DerivativeBoundReport> {
        if cloud.is_empty() {
            return Err(argument("derivative bound check needs a nonempty cloud"));
        }
        let mut report = DerivativeBoundReport {
            c1: 0.0,
            c2: 0.0,
            gradient_ratio: 0.0,
            bounded_field_constant: 0.0,
            requires_bounded_fields: matches!(self.kind, WeightKind::Cosh { .. }),
        };
        for x in cloud {
            let (g, h) = self.derivative_ratios(x)?;
            let q = 1.0 + norm(x).powi(2);
            report.c1 = report.c1.max(g * q.sqrt());
            report.c2 = report.c2.max(h * q);
            report.gradient_ratio = report.gradient_ratio.max(g);
            report.bounded_field_constant = report.bounded_field_constant.max(g + h);
        }
        Ok(report)
    }
}

/// `max_i |f(x_i)| / ψ(x_i)` over the given samples.
pub fn weighted_sup_norm(values: &[(Vec<f64>, f64)], psi: &WeightFunction) -> Result<f64> {
    if values.is_empty() {
        return Err(argument("weighted sup-norm over an empty point list"));
    }
    let mut best = 0.0f64;
    for (x, f) in values {
        if !f.is_finite() {
            return Err(Error::Domain(format!("non-finite value {f} at {x:?}")));
        }
        let ratio = if *f == 0.0 {
            0.0
        } else if psi.prefers_log_domain() {
            (f.abs().ln() - psi.eval_log(x)?).exp()
        } else {
            f.abs() / psi.eval(x)?
        };
        best = best.max(ratio);
    }
    Ok(best)
}
