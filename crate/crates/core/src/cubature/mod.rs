//! Cubature formulas on Wiener space built from piecewise-linear paths.
//!
//! A path `ω : [0, 1] → R^{d+1}` is stored as breakpoints and per-segment
//! slopes; component 0 is time (nondecreasing, from 0 to 1), components
//! `1..=d` are the Brownian directions. All iterated integrals of such
//! paths are polynomial in the increments and are computed exactly.

mod text;

pub use text::{parse_formula, write_formula};

use crate::error::{argument, Result};
use crate::quadrature::QuadratureRule;
use crate::vectorfields::MultiIndex;

/// Highest degree supported by the order checks.
pub const MAX_ORDER: usize = 7;

/// Tolerance on order defects.
pub const ORDER_TOLERANCE: f64 = 1e-10;

/// Tolerance on weak-symmetry violations.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Piecewise-linear path over `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubaturePath {
    breakpoints: Vec<f64>,
    /// One row per segment, `d + 1` entries, time first.
    slopes: Vec<Vec<f64>>,
}

impl CubaturePath {
    /// Builds a path from breakpoints `0 = s_0 < … < s_K` and `K` slope rows.
    pub fn new(breakpoints: Vec<f64>, slopes: Vec<Vec<f64>>) -> Result<Self> {
        if breakpoints.len() < 2 || slopes.len() + 1 != breakpoints.len() {
            return Err(argument(format!(
                "{} breakpoints need {} slope rows, got {}",
                breakpoints.len(),
                breakpoints.len().saturating_sub(1),
                slopes.len()
            )));
        }
        if breakpoints[0] != 0.0 {
            return Err(argument("paths start at s = 0"));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0]))
            || breakpoints.iter().any(|b| !b.is_finite())
        {
            return Err(argument(
                "breakpoints must be finite and strictly increasing",
            ));
        }
        let width = slopes[0].len();
        if width < 1 || slopes.iter().any(|r| r.len() != width) {
            return Err(argument("slope rows must share a width d + 1 >= 1"));
        }
        if slopes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(argument("slopes must be finite"));
        }
        if slopes.iter().any(|r| r[0] < 0.0) {
            return Err(argument("the time component must be nondecreasing"));
        }
        Ok(CubaturePath {
            breakpoints,
            slopes,
        })
    }

    /// A path on `[0, 1]` whose segments have equal length and the given
    /// increments (one row per segment, `d + 1` entries, time first).
    pub fn from_increments(increments: Vec<Vec<f64>>) -> Result<Self> {
        let k = increments.len();
        if k == 0 {
            return Err(argument("a path needs at least one segment"));
        }
        let len = 1.0 / k as f64;
        let breakpoints = (0..=k)
            .map(|i| if i == k { 1.0 } else { i as f64 * len })
            .collect();
        let slopes = increments
            .into_iter()
            .map(|row| row.into_iter().map(|v| v * k as f64).collect())
            .collect();
        CubaturePath::new(breakpoints, slopes)
    }

    /// Number of Brownian components `d`.
    pub fn brownian_dim(&self) -> usize {
        self.slopes[0].len() - 1
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn slopes(&self) -> &[Vec<f64>] {
        &self.slopes
    }

    pub fn segment_count(&self) -> usize {
        self.slopes.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().expect("paths have breakpoints")
    }

    /// Segment lengths.
    pub fn lengths(&self) -> impl Iterator<Item = f64> + '_ {
        self.breakpoints.windows(2).map(|w| w[1] - w[0])
    }

    /// Per-segment increment vectors (slope times length).
    pub fn increments(&self) -> Vec<Vec<f64>> {
        self.lengths()
            .zip(&self.slopes)
            .map(|(h, row)| row.iter().map(|v| v * h).collect())
            .collect()
    }

    /// `ω(s)`, all components.
    pub fn value_at(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.slopes[0].len()];
        for (w, row) in self.breakpoints.windows(2).zip(&self.slopes) {
            let h = (s.min(w[1]) - w[0]).max(0.0);
            if h == 0.0 {
                break;
            }
            for (o, v) in out.iter_mut().zip(row) {
                *o += v * h;
            }
        }
        out
    }

    /// `ω^{(Δt)}(s) = (Δt ω^0(s/Δt), √Δt ω^j(s/Δt))` on `[0, Δt·horizon]`.
    pub fn scale(&self, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(argument(format!("scaling step must be positive, got {dt}")));
        }
        let root = dt.sqrt();
        let breakpoints = self.breakpoints.iter().map(|b| b * dt).collect();
        // time: d/ds [dt ω^0(s/dt)] = slope; brownian: slope / √dt
        let slopes = self
            .slopes
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| if j == 0 { *v } else { v / root })
                    .collect()
            })
            .collect();
        Ok(CubaturePath {
            breakpoints,
            slopes,
        })
    }

    /// The path with all Brownian components negated.
    pub fn negated(&self) -> Self {
        let slopes = self
            .slopes
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| if j == 0 { *v } else { -v })
                    .collect()
            })
            .collect();
        CubaturePath {
            breakpoints: self.breakpoints.clone(),
            slopes,
        }
    }

    /// The same path with an extra breakpoint at `s` (no-op if `s` is
    /// already a breakpoint or outside the interior).
    pub fn split_at(&self, s: f64) -> Self {
        let mut out = self.clone();
        if s <= 0.0 || s >= self.horizon() || self.breakpoints.contains(&s) {
            return out;
        }
        let k = self.breakpoints.partition_point(|&b| b < s);
        out.breakpoints.insert(k, s);
        out.slopes.insert(k, self.slopes[k - 1].clone());
        out
    }

    /// `∫_{0<s_1<…<s_k<T} dω^{i_1}(s_1) … dω^{i_k}(s_k)`, exactly.
    pub fn iterated_integral(&self, alpha: &MultiIndex) -> f64 {
        let word = alpha.entries();
        let k = word.len();
        // partial[r]: integral of the first r letters up to the current time
        let mut partial = vec![0.0; k + 1];
        partial[0] = 1.0;
        for inc in self.increments() {
            // Chen: new[r] = Σ_{q ≤ r} old[q] Π_{u=q+1..r} inc[word_u] / (r-q)!
            for r in (1..=k).rev() {
                let mut acc = partial[r];
                let mut term = 1.0;
                for q in (0..r).rev() {
                    term *= inc[word[q]] / (r - q) as f64;
                    if term == 0.0 {
                        break;
                    }
                    acc += partial[q] * term;
                }
                partial[r] = acc;
            }
        }
        partial[k]
    }
}

/// A cubature formula: paths on `[0, 1]` with weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CubatureFormula {
    d: usize,
    paths: Vec<CubaturePath>,
    weights: Vec<f64>,
    declared_order: usize,
}

impl CubatureFormula {
    pub fn new(paths: Vec<CubaturePath>, weights: Vec<f64>, declared_order: usize) -> Result<Self> {
        if paths.is_empty() || paths.len() != weights.len() {
            return Err(argument(
                "formula needs matching, nonempty path and weight lists",
            ));
        }
        let d = paths[0].brownian_dim();
        if paths.iter().any(|p| p.brownian_dim() != d) {
            return Err(argument("all paths must share the Brownian dimension"));
        }
        for (i, p) in paths.iter().enumerate() {
            if (p.horizon() - 1.0).abs() > 1e-14 {
                return Err(argument(format!("path {i} is not defined on [0, 1]")));
            }
            let t_end = p.value_at(1.0)[0];
            if (t_end - 1.0).abs() > 1e-13 {
                return Err(argument(format!(
                    "time component of path {i} ends at {t_end}, not 1"
                )));
            }
        }
        let mass: f64 = weights.iter().sum();
        if (mass - 1.0).abs() > 1e-13 || weights.iter().any(|w| !w.is_finite()) {
            return Err(argument(format!("weights must sum to 1, got {mass}")));
        }
        Ok(CubatureFormula {
            d,
            paths,
            weights,
            declared_order,
        })
    }

    pub fn brownian_dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[CubaturePath] {
        &self.paths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn declared_order(&self) -> usize {
        self.declared_order
    }

    pub fn has_positive_weights(&self) -> bool {
        self.weights.iter().all(|&w| w > 0.0)
    }

    /// All paths scaled to `[0, Δt]`.
    pub fn scaled_paths(&self, dt: f64) -> Result<Vec<CubaturePath>> {
        self.paths.iter().map(|p| p.scale(dt)).collect()
    }

    /// `Σ_i λ_i ∫ dω_i^{j_1} … dω_i^{j_k}` over `[0, 1]`.
    pub fn path_iterated_integral(&self, alpha: &MultiIndex) -> Result<f64> {
        if let Some(&bad) = alpha.entries().iter().find(|&&i| i > self.d) {
            return Err(argument(format!(
                "multi-index entry {bad} exceeds d = {}",
                self.d
            )));
        }
        Ok(self
            .paths
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * p.iterated_integral(alpha))
            .sum())
    }

    /// Compares every iterated integral with degree `≤ m` against its
    /// Brownian expectation.
    pub fn verify_order(&self, m: usize) -> Result<OrderReport> {
        if m > MAX_ORDER {
            return Err(argument(format!(
                "order checks support m <= {MAX_ORDER}, got {m}"
            )));
        }
        let mut defects = Vec::new();
        for alpha in MultiIndex::enumerate(self.d, m) {
            let got = self.path_iterated_integral(&alpha)?;
            let want = expected_iterated_integral(&alpha)?;
            defects.push((alpha, (got - want).abs()));
        }
        let max_defect = defects.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        Ok(OrderReport {
            order: m,
            passed: max_defect <= ORDER_TOLERANCE,
            max_defect,
            defects,
        })
    }

    /// Largest `|Σ_i λ_i ω_i^j(s)|` over `j ≥ 1` and `s` in the sample grid
    /// together with every breakpoint and segment midpoint.
    pub fn check_weak_symmetry(&self, sample_s: &[f64]) -> Result<SymmetryReport> {
        if sample_s.is_empty() {
            return Err(argument("weak-symmetry check needs a nonempty grid"));
        }
        let mut grid: Vec<f64> = sample_s.to_vec();
        for p in &self.paths {
            for w in p.breakpoints.windows(2) {
                grid.push(w[0]);
                grid.push(0.5 * (w[0] + w[1]));
                grid.push(w[1]);
            }
        }
        grid.sort_by(|a, b| a.total_cmp(b));
        grid.dedup();
        let mut worst = 0.0f64;
        let mut worst_at = 0.0;
        for &s in &grid {
            let mut mean = vec![0.0; self.d + 1];
            for (p, w) in self.paths.iter().zip(&self.weights) {
                for (m, v) in mean.iter_mut().zip(p.value_at(s)) {
                    *m += w * v;
                }
            }
            for v in &mean[1..] {
                if v.abs() > worst {
                    worst = v.abs();
                    worst_at = s;
                }
            }
        }
        Ok(SymmetryReport {
            passed: worst <= SYMMETRY_TOLERANCE,
            max_violation: worst,
            at: worst_at,
        })
    }

    /// Adds the Brownian-negated copy of every path and halves all weights.
    pub fn symmetrize(&self) -> CubatureFormula {
        let mut paths = self.paths.clone();
        paths.extend(self.paths.iter().map(CubaturePath::negated));
        let mut weights: Vec<f64> = self.weights.iter().map(|w| 0.5 * w).collect();
        weights.extend(self.weights.iter().map(|w| 0.5 * w));
        CubatureFormula {
            d: self.d,
            paths,
            weights,
            declared_order: self.declared_order,
        }
    }

    /// Merges identical paths by summing their weights; paths are sorted
    /// into a canonical order. Used to compare discrete measures.
    pub fn canonical_measure(&self) -> Vec<(CubaturePath, f64)> {
        let mut items: Vec<(CubaturePath, f64)> = self
            .paths
            .iter()
            .cloned()
            .zip(self.weights.iter().copied())
            .collect();
        items.sort_by(|a, b| {
            let ka = a.0.breakpoints.iter().chain(a.0.slopes.iter().flatten());
            let kb = b.0.breakpoints.iter().chain(b.0.slopes.iter().flatten());
            ka.zip(kb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or_else(|| a.0.breakpoints.len().cmp(&b.0.breakpoints.len()))
        });
        let mut merged: Vec<(CubaturePath, f64)> = Vec::new();
        for (p, w) in items {
            match merged.last_mut() {
                Some((q, v)) if *q == p => *v += w,
                _ => merged.push((p, w)),
            }
        }
        merged
    }
}

/// Per-multi-index order defects.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderReport {
    pub order: usize,
    pub passed: bool,
    pub max_defect: f64,
    pub defects: Vec<(MultiIndex, f64)>,
}

impl OrderReport {
    /// Multi-indices whose defect exceeds the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &(MultiIndex, f64)> {
        self.defects.iter().filter(|(_, e)| *e > ORDER_TOLERANCE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetryReport {
    pub passed: bool,
    pub max_violation: f64,
    /// Where the largest violation occurred.
    pub at: f64,
}

/// `E[∫_{0<s_1<…<s_k<1} ∘dB^{j_1} … ∘dB^{j_k}]` with `B^0_t = t`.
///
/// Reduced recursively: the expectation vanishes unless the word splits
/// into blocks `(0)` and `(j, j)`, and the last block contributes
/// `1 / (deg/2)` (time) or `1 / (2 · deg/2)` (a Brownian pair) times the
/// expectation of the remaining word.
pub fn expected_iterated_integral(alpha: &MultiIndex) -> Result<f64> {
    let deg = alpha.degree();
    if deg > MAX_ORDER {
        return Err(argument(format!(
            "expected iterated integrals are supported up to degree {MAX_ORDER}, got {deg}"
        )));
    }
    Ok(expected_word(alpha.entries()))
}

fn expected_word(word: &[usize]) -> f64 {
    match word {
        [] => 1.0,
        [rest @ .., 0] => {
            let half_degree = (MultiIndex::new(word.to_vec()).degree() / 2) as f64;
            expected_word(rest) / half_degree
        }
        [rest @ .., a, b] if a == b => {
            let half_degree = (MultiIndex::new(word.to_vec()).degree() / 2) as f64;
            0.5 * expected_word(rest) / half_degree
        }
        _ => 0.0,
    }
}

/// Ninomiya-Victoir-type formula from a symmetric Gaussian rule of dimension `d`.
///
/// For each node `ξ_i` with weight `w_i` two paths are emitted, each with
/// weight `w_i / 2`, over `d + 1` equal segments:
/// the forward sweep runs time, then `B^1` with increment `ξ_{i,1}`, …,
/// then `B^d`; the reverse sweep runs `B^d`, …, `B^1`, then time.
pub fn build_nv_formula(rule: &QuadratureRule) -> Result<CubatureFormula> {
    if !rule.is_symmetric(1e-12) {
        return Err(argument(
            "NV construction needs a rule closed under negation (weak symmetry would fail)",
        ));
    }
    let d = rule.dim();
    let q = rule.len();
    let mut paths = Vec::with_capacity(2 * q);
    let mut weights = Vec::with_capacity(2 * q);
    let segment = |component: usize, value: f64| {
        let mut row = vec![0.0; d + 1];
        row[component] = value;
        row
    };
    for xi in rule.nodes() {
        let mut forward = vec![segment(0, 1.0)];
        forward.extend((1..=d).map(|j| segment(j, xi[j - 1])));
        paths.push(CubaturePath::from_increments(forward)?);
    }
    for xi in rule.nodes() {
        let mut reverse: Vec<Vec<f64>> = (1..=d).rev().map(|j| segment(j, xi[j - 1])).collect();
        reverse.push(segment(0, 1.0));
        paths.push(CubaturePath::from_increments(reverse)?);
    }
    weights.extend(rule.weights().iter().map(|w| 0.5 * w));
    weights.extend(rule.weights().iter().map(|w| 0.5 * w));
    let order = rule.degree().min(5);
    CubatureFormula::new(paths, weights, order)
}
