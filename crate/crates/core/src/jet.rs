//! Scalars for exact nested directional derivatives.
//!
//! A [`Jet`] is a truncated multivariate Taylor polynomial in up to
//! [`MAX_NESTING`] nilpotent infinitesimals `e_1..e_4` with `e_i^2 = 0`
//! (hyper-dual numbers). Coefficients are indexed by the bitmask of the
//! infinitesimals in the monomial, so the coefficient of `e_1 e_2 ... e_k`
//! of `f(x + e_1 W_1 + ...)` is exactly the nested Lie derivative
//! `W_1 W_2 ... W_k f(x)`.
//!
//! Model fields and payoffs that want exact derivatives implement their
//! formulas once over the [`Scalar`] trait and get both `f64` and `Jet`
//! evaluation.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Number of independent infinitesimals carried by a [`Jet`].
pub const MAX_NESTING: usize = 4;

const SIZE: usize = 1 << MAX_NESTING;

/// Numeric type accepted by generically written fields and payoffs.
pub trait Scalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn cst(v: f64) -> Self;
    /// The real (constant) part.
    fn re(&self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, p: f64) -> Self;
    fn cosh(self) -> Self;
    /// `max(self, lo)` decided on the real part.
    fn clamp_min(self, lo: f64) -> Self {
        if self.re() < lo {
            Self::cst(lo)
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    #[inline]
    fn cosh(self) -> Self {
        f64::cosh(self)
    }
}

/// Hyper-dual number with [`MAX_NESTING`] infinitesimals.
#[derive(Clone, Copy, PartialEq)]
pub struct Jet {
    c: [f64; SIZE],
}

impl fmt::Debug for Jet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Jet").field("c", &self.c).finish()
    }
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        let mut c = [0.0; SIZE];
        c[0] = v;
        Jet { c }
    }

    /// The infinitesimal `e_k`, `k < MAX_NESTING`.
    pub fn infinitesimal(k: usize) -> Self {
        assert!(k < MAX_NESTING, "jet supports {MAX_NESTING} infinitesimals");
        let mut c = [0.0; SIZE];
        c[1 << k] = 1.0;
        Jet { c }
    }

    /// Coefficient of the monomial whose infinitesimals are the set bits of `mask`.
    pub fn coeff(&self, mask: usize) -> f64 {
        self.c[mask]
    }

    fn nilpotent_part(mut self) -> Self {
        self.c[0] = 0.0;
        self
    }

    /// Applies an analytic function given its value and first four
    /// derivatives at the real part.
    fn compose(self, derivs: [f64; MAX_NESTING + 1]) -> Self {
        let n = self.nilpotent_part();
        let mut out = Jet::constant(derivs[0]);
        let mut power = n;
        let mut factorial = 1.0;
        for (k, d) in derivs.iter().enumerate().skip(1) {
            factorial *= k as f64;
            if *d != 0.0 {
                out += power * (d / factorial);
            }
            if k < MAX_NESTING {
                power = power * n;
            }
        }
        out
    }
}

impl Add for Jet {
    type Output = Jet;
    #[inline]
    fn add(mut self, rhs: Jet) -> Jet {
        for (a, b) in self.c.iter_mut().zip(rhs.c.iter()) {
            *a += b;
        }
        self
    }
}

impl Sub for Jet {
    type Output = Jet;
    #[inline]
    fn sub(mut self, rhs: Jet) -> Jet {
        for (a, b) in self.c.iter_mut().zip(rhs.c.iter()) {
            *a -= b;
        }
        self
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        let mut c = [0.0; SIZE];
        for (s, out) in c.iter_mut().enumerate() {
            // enumerate subsets t of s
            let mut t = s;
            let mut acc = 0.0;
            loop {
                acc += self.c[t] * rhs.c[s ^ t];
                if t == 0 {
                    break;
                }
                t = (t - 1) & s;
            }
            *out = acc;
        }
        Jet { c }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        let a = rhs.c[0];
        let r = 1.0 / a;
        let recip = rhs.compose([
            r,
            -r * r,
            2.0 * r.powi(3),
            -6.0 * r.powi(4),
            24.0 * r.powi(5),
        ]);
        self * recip
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(mut self) -> Jet {
        for a in self.c.iter_mut() {
            *a = -*a;
        }
        self
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, rhs: f64) -> Jet {
        self.c[0] += rhs;
        self
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: f64) -> Jet {
        self.c[0] -= rhs;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(mut self, rhs: f64) -> Jet {
        for a in self.c.iter_mut() {
            *a *= rhs;
        }
        self
    }
}

impl Div<f64> for Jet {
    type Output = Jet;
    fn div(self, rhs: f64) -> Jet {
        self * (1.0 / rhs)
    }
}

impl AddAssign for Jet {
    fn add_assign(&mut self, rhs: Jet) {
        *self = *self + rhs;
    }
}

impl SubAssign for Jet {
    fn sub_assign(&mut self, rhs: Jet) {
        *self = *self - rhs;
    }
}

impl MulAssign for Jet {
    fn mul_assign(&mut self, rhs: Jet) {
        *self = *self * rhs;
    }
}

impl Scalar for Jet {
    fn cst(v: f64) -> Self {
        Jet::constant(v)
    }

    fn re(&self) -> f64 {
        self.c[0]
    }

    fn sqrt(self) -> Self {
        let a = self.c[0];
        let s = a.sqrt();
        self.compose([
            s,
            0.5 / s,
            -0.25 / (a * s),
            0.375 / (a * a * s),
            -0.9375 / (a * a * a * s),
        ])
    }

    fn exp(self) -> Self {
        let e = self.c[0].exp();
        self.compose([e; 5])
    }

    fn ln(self) -> Self {
        let a = self.c[0];
        self.compose([
            a.ln(),
            1.0 / a,
            -1.0 / (a * a),
            2.0 / a.powi(3),
            -6.0 / a.powi(4),
        ])
    }

    fn sin(self) -> Self {
        let (s, c) = self.c[0].sin_cos();
        self.compose([s, c, -s, -c, s])
    }

    fn cos(self) -> Self {
        let (s, c) = self.c[0].sin_cos();
        self.compose([c, -s, -c, s, c])
    }

    fn tanh(self) -> Self {
        let t = self.c[0].tanh();
        let s = 1.0 - t * t; // sech^2
        self.compose([
            t,
            s,
            -2.0 * t * s,
            s * (6.0 * t * t - 2.0),
            8.0 * t * s * (2.0 - 3.0 * t * t),
        ])
    }

    fn powi(self, n: i32) -> Self {
        self.powf(n as f64)
    }

    fn powf(self, p: f64) -> Self {
        let a = self.c[0];
        if a == 0.0 && p.fract() == 0.0 && p >= 0.0 {
            // exact integer powers through zero
            let n = p as u32;
            let mut out = Jet::constant(1.0);
            for _ in 0..n {
                out = out * self;
            }
            return out;
        }
        let mut d = [0.0; 5];
        let mut coef = 1.0;
        for (k, dk) in d.iter_mut().enumerate() {
            *dk = coef * a.powf(p - k as f64);
            coef *= p - k as f64;
        }
        self.compose(d)
    }

    fn cosh(self) -> Self {
        let a = self.c[0];
        let (c, s) = (a.cosh(), a.sinh());
        self.compose([c, s, c, s, c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(k: usize) -> Jet {
        Jet::infinitesimal(k)
    }

    #[test]
    fn product_rule_through_bitmasks() {
        // (2 + e0)(3 + e1) = 6 + 3 e0 + 2 e1 + e0 e1
        let p = (e(0) + 2.0) * (e(1) + 3.0);
        assert_eq!(p.coeff(0), 6.0);
        assert_eq!(p.coeff(1), 3.0);
        assert_eq!(p.coeff(2), 2.0);
        assert_eq!(p.coeff(3), 1.0);
    }

    #[test]
    fn nested_second_derivative_of_exp() {
        // d^2/dt^2 exp(t) at t=0.3 via two infinitesimals
        let x = e(0) + e(1) + 0.3;
        assert!((x.exp().coeff(3) - 0.3f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn fourth_derivatives_match_closed_forms() {
        let a = 0.7;
        let x = e(0) + e(1) + e(2) + e(3) + a;
        let all = 0b1111;
        assert!((x.sin().coeff(all) - a.sin()).abs() < 1e-14);
        assert!((x.cos().coeff(all) - a.cos()).abs() < 1e-14);
        // d^4 sqrt = -15/16 a^{-7/2}
        assert!((x.sqrt().coeff(all) + 15.0 / 16.0 * a.powf(-3.5)).abs() < 1e-12);
        // d^4 x^5 = 120 a
        assert!((x.powi(5).coeff(all) - 120.0 * a).abs() < 1e-12);
        let t = a.tanh();
        let s = 1.0 - t * t;
        let d4 = 8.0 * t * s * (2.0 - 3.0 * t * t);
        assert!((x.tanh().coeff(all) - d4).abs() < 1e-12);
    }

    #[test]
    fn division_and_log_agree_with_reciprocal() {
        let x = e(0) + e(1) + 2.0;
        let q = Jet::constant(1.0) / x;
        // d^2(1/x) = 2/x^3
        assert!((q.coeff(3) - 0.25).abs() < 1e-15);
        assert!((x.ln().coeff(3) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn integer_power_through_zero() {
        let x = e(0) + e(1);
        assert_eq!(x.powi(2).coeff(3), 2.0);
    }
}
