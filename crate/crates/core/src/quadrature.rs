//! Gauss-Hermite rules for standard normal expectations (probabilists'
//! normalization) and their tensor products.

use crate::error::{argument, Result};

/// A quadrature rule `E[p(ξ)] ≈ Σ_i w_i p(ξ_i)` for `ξ ~ N(0, I_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    dim: usize,
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
    degree: usize,
}

impl QuadratureRule {
    /// Builds a rule from explicit nodes and weights with a claimed degree
    /// of exactness.
    pub fn new(nodes: Vec<Vec<f64>>, weights: Vec<f64>, degree: usize) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(argument(
                "rule needs matching, nonempty node and weight lists",
            ));
        }
        let dim = nodes[0].len();
        if dim == 0 || nodes.iter().any(|n| n.len() != dim) {
            return Err(argument("rule nodes must share a positive dimension"));
        }
        Ok(QuadratureRule {
            dim,
            nodes,
            weights,
            degree,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Degree of polynomial exactness.
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Whether every node `ξ` has a partner `-ξ` with the same weight.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.nodes.iter().zip(&self.weights).all(|(xi, w)| {
            self.nodes.iter().zip(&self.weights).any(|(eta, v)| {
                (w - v).abs() <= tol && xi.iter().zip(eta).all(|(a, b)| (a + b).abs() <= tol)
            })
        })
    }
}

/// The `⌈(degree+1)/2⌉`-point Gauss-Hermite rule for `N(0, 1)`.
///
/// Closed forms for up to four points; `degree` must be one of 1, 3, 5, 7.
pub fn gauss_hermite_normal_1d(degree: usize) -> Result<QuadratureRule> {
    let (nodes, weights): (Vec<f64>, Vec<f64>) = match degree {
        1 => (vec![0.0], vec![1.0]),
        3 => (vec![-1.0, 1.0], vec![0.5, 0.5]),
        5 => {
            let r = 3f64.sqrt();
            (vec![-r, 0.0, r], vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0])
        }
        7 => {
            // roots of He_4(x) = x^4 - 6x^2 + 3, weights n!/(n^2 He_3(x)^2)
            let s6 = 6f64.sqrt();
            let inner = (3.0 - s6).sqrt();
            let outer = (3.0 + s6).sqrt();
            let w_inner = 1.0 / (4.0 * (3.0 - s6));
            let w_outer = 1.0 / (4.0 * (3.0 + s6));
            (
                vec![-outer, -inner, inner, outer],
                vec![w_outer, w_inner, w_inner, w_outer],
            )
        }
        other => {
            return Err(argument(format!(
                "Gauss-Hermite degree {other} is not supported (use 1, 3, 5 or 7)"
            )))
        }
    };
    QuadratureRule::new(
        nodes.into_iter().map(|x| vec![x]).collect(),
        weights,
        degree,
    )
}

/// Cartesian product of one-dimensional rules; the first factor varies slowest.
pub fn tensor_product(rules: &[QuadratureRule]) -> Result<QuadratureRule> {
    if rules.is_empty() {
        return Err(argument("tensor product of an empty rule list"));
    }
    if rules.iter().any(|r| r.dim != 1) {
        return Err(argument("tensor product factors must be one-dimensional"));
    }
    let mut nodes = vec![Vec::new()];
    let mut weights = vec![1.0];
    for rule in rules {
        let mut next_nodes = Vec::with_capacity(nodes.len() * rule.len());
        let mut next_weights = Vec::with_capacity(nodes.len() * rule.len());
        for (prefix, w) in nodes.iter().zip(&weights) {
            for (xi, v) in rule.nodes.iter().zip(&rule.weights) {
                let mut node = prefix.clone();
                node.push(xi[0]);
                next_nodes.push(node);
                next_weights.push(w * v);
            }
        }
        nodes = next_nodes;
        weights = next_weights;
    }
    let degree = rules.iter().map(|r| r.degree).min().unwrap_or(0);
    QuadratureRule::new(nodes, weights, degree)
}

/// `E[ξ^k]` for `ξ ~ N(0, 1)`: `(k-1)!!` for even `k`, 0 for odd.
pub fn normal_moment(k: usize) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    (1..k).step_by(2).map(|j| j as f64).product()
}

/// Largest error of the rule on monomials `Π ξ_k^{a_k}` with `Σ a_k ≤ degree`.
pub fn verify_normal_moments(rule: &QuadratureRule, degree: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut exps = vec![0usize; rule.dim];
    loop {
        if exps.iter().sum::<usize>() <= degree {
            let approx: f64 = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(xi, w)| {
                    w * xi
                        .iter()
                        .zip(&exps)
                        .map(|(x, &a)| x.powi(a as i32))
                        .product::<f64>()
                })
                .sum();
            let exact: f64 = exps.iter().map(|&a| normal_moment(a)).product();
            worst = worst.max((approx - exact).abs());
        }
        // odometer over exponents 0..=degree
        let mut k = 0;
        loop {
            if k == exps.len() {
                return worst;
            }
            exps[k] += 1;
            if exps[k] <= degree {
                break;
            }
            exps[k] = 0;
            k += 1;
        }
    }
}
