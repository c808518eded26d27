//! Coefficient matrices of the `k`-stage, `r`-coefficient collocation method.
//!
//! With `P` the `k × r` matrix of basis values `P̂_j(c_i)`, `Ω = diag(b)` and
//! `L[i][j] = ∫₀^{c_i} P̂_j(x)(c_i − x) dx`, the Nyström matrix is
//! `Ā = L Pᵀ Ω`. Integrating the basis twice in closed form gives
//! `L = P_ext X̂`, where `P_ext` carries the two extra degrees `r` and `r + 1`
//! and `X̂` stacks the `r × r` matrix `X` on two sparse rows.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::legendre::{gauss_legendre_rule, shifted_upto, xi_unchecked, QuadratureRule};
use crate::linalg::{condition_number, eigenvalues};
use crate::matrix_text::write_matrices;

fn check_r(r: usize) -> Result<()> {
    if r < 2 {
        return Err(invalid(format!("r must be at least 2, got {r}")));
    }
    Ok(())
}

/// The `(r + 2) × r` matrix `X̂` with `L = P_ext X̂`. Column `j` holds the
/// Legendre coefficients of `∫₀^c P̂_j(x)(c − x) dx` as a function of `c`.
pub fn build_xhat(r: usize) -> Result<DMatrix<f64>> {
    check_r(r)?;
    let xi = xi_unchecked;
    let mut m = DMatrix::zeros(r + 2, r);
    for j in 0..r {
        match j {
            0 => {
                m[(0, 0)] = 0.25 - xi(1) * xi(1);
                m[(1, 0)] = xi(1) / 2.0;
            }
            1 => {
                m[(0, 1)] = -xi(1) / 2.0;
                m[(1, 1)] = -(xi(1) * xi(1) + xi(2) * xi(2));
            }
            _ => {
                m[(j - 2, j)] = xi(j - 1) * xi(j);
                m[(j, j)] = -(xi(j) * xi(j) + xi(j + 1) * xi(j + 1));
            }
        }
        m[(j + 2, j)] = xi(j + 1) * xi(j + 2);
    }
    Ok(m)
}

/// The `r × r` matrix `X`: the top block of [`build_xhat`].
pub fn build_x(r: usize) -> Result<DMatrix<f64>> {
    Ok(build_xhat(r)?.rows(0, r).into_owned())
}

/// `det X_r` from the two-term recursion
/// `S₁ = ¼ − ξ₁²`, `S_{2n} = −ξ_{2n}² S_{2n−1} + ξ₁⁴ξ₃⁴⋯ξ_{2n−1}⁴`,
/// `S_{2n+1} = −ξ_{2n+1}² S_{2n} + ¼ ξ₂⁴ξ₄⁴⋯ξ_{2n}⁴`.
pub fn det_recursion(r: usize) -> Result<f64> {
    if r == 0 {
        return Err(invalid("det_recursion requires r >= 1"));
    }
    let xi4 = |m: usize| xi_unchecked(m).powi(4);
    let mut s = 0.25 - xi_unchecked(1).powi(2);
    for n in 2..=r {
        let tail = if n % 2 == 0 {
            (1..n).step_by(2).map(xi4).product::<f64>()
        } else {
            0.25 * (2..n).step_by(2).map(xi4).product::<f64>()
        };
        s = -xi_unchecked(n).powi(2) * s + tail;
    }
    Ok(s)
}

/// Blending parameter `ρ² = min |λ|` over the spectrum of `X_r`.
pub fn rho_squared(r: usize) -> Result<f64> {
    Ok(min_modulus(&build_x(r)?))
}

fn min_modulus(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .iter()
        .map(|z| z.norm())
        .fold(f64::INFINITY, f64::min)
}

/// Every matrix that defines one method instance.
#[derive(Debug, Clone)]
pub struct MethodCoefficients {
    k: usize,
    r: usize,
    rule: QuadratureRule,
    l: DMatrix<f64>,
    p: DMatrix<f64>,
    p_ext: DMatrix<f64>,
    omega: DMatrix<f64>,
    x: DMatrix<f64>,
    x_inv: DMatrix<f64>,
    xhat: DMatrix<f64>,
    rho2: f64,
    a_bar: DMatrix<f64>,
    b_bar: Vec<f64>,
    /// `Pᵀ Ω`, the map from stage forces to Legendre coefficients.
    projection: DMatrix<f64>,
    newton_core: DMatrix<f64>,
}

/// Builds the method for `k` stages and `r` coefficients on the given rule.
pub fn build_coefficients(k: usize, r: usize, rule: QuadratureRule) -> Result<MethodCoefficients> {
    check_r(r)?;
    if r > k {
        return Err(invalid(format!("r = {r} exceeds the stage count k = {k}")));
    }
    if rule.len() != k {
        return Err(invalid(format!(
            "rule has {} nodes but k = {k}",
            rule.len()
        )));
    }
    let c = rule.nodes();
    let b = rule.weights();
    let mut p_ext = DMatrix::zeros(k, r + 2);
    for (i, &ci) in c.iter().enumerate() {
        for (j, v) in shifted_upto(r + 1, ci).into_iter().enumerate() {
            p_ext[(i, j)] = v;
        }
    }
    let p = p_ext.columns(0, r).into_owned();
    let xhat = build_xhat(r)?;
    let x = xhat.rows(0, r).into_owned();
    let l = &p_ext * &xhat;
    let omega = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(b));
    let projection = p.transpose() * &omega;
    let a_bar = &l * &projection;
    let b_bar = c.iter().zip(b).map(|(ci, bi)| (1.0 - ci) * bi).collect();
    let x_inv = x.clone().try_inverse().ok_or(Error::Singular {
        matrix: "X",
        h: None,
    })?;
    let rho2 = min_modulus(&x);
    let newton_core = &projection * &l;
    Ok(MethodCoefficients {
        k,
        r,
        rule,
        l,
        p,
        p_ext,
        omega,
        x,
        x_inv,
        xhat,
        rho2,
        a_bar,
        b_bar,
        projection,
        newton_core,
    })
}

impl MethodCoefficients {
    /// The method on the `k`-point Gauss–Legendre rule.
    pub fn gauss(k: usize, r: usize) -> Result<Self> {
        build_coefficients(k, r, gauss_legendre_rule(k)?)
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn r(&self) -> usize {
        self.r
    }
    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }
    pub fn nodes(&self) -> &[f64] {
        self.rule.nodes()
    }
    /// Quadrature weights, i.e. the `b` row of the tableau.
    pub fn b(&self) -> &[f64] {
        self.rule.weights()
    }
    /// `(1 − c_l) b_l`.
    pub fn b_bar(&self) -> &[f64] {
        &self.b_bar
    }
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn p_ext(&self) -> &DMatrix<f64> {
        &self.p_ext
    }
    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn x_inv(&self) -> &DMatrix<f64> {
        &self.x_inv
    }
    pub fn xhat(&self) -> &DMatrix<f64> {
        &self.xhat
    }
    pub fn rho2(&self) -> f64 {
        self.rho2
    }
    pub fn a_bar(&self) -> &DMatrix<f64> {
        &self.a_bar
    }
    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }
    /// Cached [`newton_core_matrix`].
    pub fn newton_core(&self) -> &DMatrix<f64> {
        &self.newton_core
    }

    /// Writes every coefficient matrix in the [`crate::matrix_text`] format.
    pub fn to_text(&self) -> String {
        let row = |v: &[f64]| DMatrix::from_row_slice(1, v.len(), v);
        let c = row(self.nodes());
        let b = row(self.b());
        let b_bar = row(&self.b_bar);
        let rho2 = DMatrix::from_element(1, 1, self.rho2);
        write_matrices(
            &format!("collocation coefficients k={} r={}", self.k, self.r),
            [
                ("c", &c),
                ("b", &b),
                ("b_bar", &b_bar),
                ("L", &self.l),
                ("P", &self.p),
                ("P_ext", &self.p_ext),
                ("Omega", &self.omega),
                ("X", &self.x),
                ("Xhat", &self.xhat),
                ("rho2", &rho2),
                ("A_bar", &self.a_bar),
            ],
        )
    }
}

/// `C = Pᵀ Ω L`, the `r × r` matrix of the simplified Newton system
/// `(I − h² C ⊗ J₀) Δ = −F(γ)`. Equals `X` whenever `k > r` and the rule is
/// exact to degree `2k − 1`.
pub fn newton_core_matrix(coeffs: &MethodCoefficients) -> DMatrix<f64> {
    &coeffs.projection * &coeffs.l
}

/// A fundamental/silent split of the stages and the reduced `r × r` matrices.
#[derive(Debug, Clone, Serialize)]
pub struct StagePartition {
    pub fundamental_indices: Vec<usize>,
    pub silent_indices: Vec<usize>,
    /// `L⁽²⁾ (L⁽¹⁾)⁻¹`, `(k − r) × r`.
    #[serde(skip)]
    pub a1: DMatrix<f64>,
    #[serde(skip)]
    pub b1: DMatrix<f64>,
    #[serde(skip)]
    pub b2: DMatrix<f64>,
    /// `B₁ + B₂ A₁`.
    #[serde(skip)]
    pub c_tilde: DMatrix<f64>,
    pub c_tilde_condition: f64,
}

/// Splits the stages into the given (0-based) fundamental indices and the rest.
pub fn silent_stage_split(
    coeffs: &MethodCoefficients,
    fundamental_indices: &[usize],
) -> Result<StagePartition> {
    let (k, r) = (coeffs.k, coeffs.r);
    if fundamental_indices.len() != r {
        return Err(invalid(format!(
            "expected {r} fundamental indices, got {}",
            fundamental_indices.len()
        )));
    }
    let mut seen = vec![false; k];
    for &i in fundamental_indices {
        if i >= k || seen[i] {
            return Err(invalid(format!(
                "fundamental indices must be distinct and below {k}: {fundamental_indices:?}"
            )));
        }
        seen[i] = true;
    }
    let silent: Vec<usize> = (0..k).filter(|&i| !seen[i]).collect();
    let rows = |m: &DMatrix<f64>, idx: &[usize]| m.select_rows(idx.iter());
    let l1 = rows(&coeffs.l, fundamental_indices);
    let l2 = rows(&coeffs.l, &silent);
    let p1 = rows(&coeffs.p, fundamental_indices);
    let p2 = rows(&coeffs.p, &silent);
    let b = coeffs.b();
    let omega1 = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        r,
        fundamental_indices.iter().map(|&i| b[i]),
    ));
    let omega2 = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        silent.len(),
        silent.iter().map(|&i| b[i]),
    ));
    let l1_inv = l1
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or(Error::Singular {
            matrix: "fundamental block L(1)",
            h: None,
        })?;
    let a1 = &l2 * &l1_inv;
    let b1 = &l1 * p1.transpose() * &omega1;
    let b2 = &l1 * p2.transpose() * &omega2;
    let c_tilde = &b1 + &b2 * &a1;
    let c_tilde_condition = condition_number(&c_tilde);
    Ok(StagePartition {
        fundamental_indices: fundamental_indices.to_vec(),
        silent_indices: silent,
        a1,
        b1,
        b2,
        c_tilde,
        c_tilde_condition,
    })
}
