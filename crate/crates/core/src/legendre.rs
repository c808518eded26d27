//! Orthonormal shifted Legendre polynomials on `[0, 1]` and Gauss–Legendre rules.
//!
//! The basis is `P̂_j(x) = sqrt(2j + 1) · P_j(2x − 1)`, so that
//! `∫₀¹ P̂_i P̂_j dx = δ_ij`. Antiderivatives are expressed in the same basis
//! through the coupling constants `ξ_m = 1 / (2 sqrt(4m² − 1))`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest node count accepted by [`gauss_legendre_rule`].
pub const MAX_GAUSS_NODES: usize = 32;

fn check_unit_interval(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::OutOfDomain {
            what: "x",
            value: x,
            domain: "[0, 1]",
        })
    }
}

/// Values of the classical Legendre polynomials `P_0(t) ..= P_n(t)` on `[-1, 1]`.
fn classical_upto(n: usize, t: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(n + 1);
    p.push(1.0);
    if n >= 1 {
        p.push(t);
    }
    for m in 1..n {
        let m_f = m as f64;
        let next = ((2.0 * m_f + 1.0) * t * p[m] - m_f * p[m - 1]) / (m_f + 1.0);
        p.push(next);
    }
    p
}

/// Evaluates `P̂_0(x) ..= P̂_n(x)` without domain checks.
pub(crate) fn shifted_upto(n: usize, x: f64) -> Vec<f64> {
    let mut p = classical_upto(n, 2.0 * x - 1.0);
    for (j, v) in p.iter_mut().enumerate() {
        *v *= ((2 * j + 1) as f64).sqrt();
    }
    p
}

/// `P̂_j(x)`, the orthonormal shifted Legendre polynomial of degree `j`.
pub fn eval_legendre(j: usize, x: f64) -> Result<f64> {
    check_unit_interval(x)?;
    Ok(shifted_upto(j, x)[j])
}

/// `ξ_m = 1 / (2 sqrt(4m² − 1))` for `m ≥ 1`.
pub fn xi(m: usize) -> Result<f64> {
    if m == 0 {
        return Err(invalid("xi(m) requires m >= 1"));
    }
    Ok(xi_unchecked(m))
}

#[inline]
pub(crate) fn xi_unchecked(m: usize) -> f64 {
    let m = m as f64;
    1.0 / (2.0 * (4.0 * m * m - 1.0).sqrt())
}

/// `∫₀ˣ P̂_j(t) dt`, written back in the Legendre basis:
///
/// * `j = 0`: `ξ₁ P̂₁(x) + ½ P̂₀(x)`
/// * `j ≥ 1`: `ξ_{j+1} P̂_{j+1}(x) − ξ_j P̂_{j−1}(x)`
pub fn integrated_legendre(j: usize, x: f64) -> Result<f64> {
    check_unit_interval(x)?;
    let p = shifted_upto(j + 1, x);
    Ok(if j == 0 {
        xi_unchecked(1) * p[1] + 0.5 * p[0]
    } else {
        xi_unchecked(j + 1) * p[j + 1] - xi_unchecked(j) * p[j - 1]
    })
}

/// Evaluator for `P̂_0 ..= P̂_max_degree`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LegendreBasis {
    max_degree: usize,
}

impl LegendreBasis {
    pub fn new(max_degree: usize) -> Self {
        Self { max_degree }
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn eval(&self, j: usize, x: f64) -> Result<f64> {
        if j > self.max_degree {
            return Err(invalid(format!(
                "degree {j} exceeds basis maximum {}",
                self.max_degree
            )));
        }
        eval_legendre(j, x)
    }

    /// All basis values at `x`, indexed by degree.
    pub fn eval_all(&self, x: f64) -> Result<Vec<f64>> {
        check_unit_interval(x)?;
        Ok(shifted_upto(self.max_degree, x))
    }
}

/// A quadrature formula `∫₀¹ g ≈ Σ b_l g(c_l)` with nondecreasing nodes in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(invalid("quadrature rule needs at least one node"));
        }
        if nodes.len() != weights.len() {
            return Err(invalid(format!(
                "{} nodes but {} weights",
                nodes.len(),
                weights.len()
            )));
        }
        if nodes.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid("quadrature nodes must lie in [0, 1]"));
        }
        if nodes.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid("quadrature nodes must be nondecreasing"));
        }
        if weights.iter().any(|&b| !(b > 0.0)) {
            return Err(invalid("quadrature weights must be positive"));
        }
        Ok(Self { nodes, weights })
    }

    /// Number of nodes `k`.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, g: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&c, &b)| b * g(c))
            .sum()
    }
}

/// The `k`-point Gauss–Legendre rule mapped to `[0, 1]`.
///
/// Roots of `P_k` are found by Newton's method from Chebyshev-type initial
/// guesses; each converges quadratically to machine precision for `k ≤ 32`.
pub fn gauss_legendre_rule(k: usize) -> Result<QuadratureRule> {
    if k == 0 || k > MAX_GAUSS_NODES {
        return Err(invalid(format!(
            "Gauss-Legendre node count must be in 1..={MAX_GAUSS_NODES}, got {k}"
        )));
    }
    let kf = k as f64;
    let mut nodes = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for i in 1..=k {
        // Roots come out in decreasing t, i.e. the mapped nodes descend; reversed below.
        let mut t = (std::f64::consts::PI * (i as f64 - 0.25) / (kf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let p = classical_upto(k, t);
            dp = kf * (t * p[k] - p[k - 1]) / (t * t - 1.0);
            let dt = p[k] / dp;
            t -= dt;
            if dt.abs() <= 4.0 * f64::EPSILON * t.abs().max(1.0) {
                let p = classical_upto(k, t);
                dp = kf * (t * p[k] - p[k - 1]) / (t * t - 1.0);
                break;
            }
        }
        let w = 2.0 / ((1.0 - t * t) * dp * dp);
        nodes.push(0.5 * (1.0 + t));
        weights.push(0.5 * w);
    }
    nodes.reverse();
    weights.reverse();
    QuadratureRule::new(nodes, weights)
}
