//! Iteration engines for the per-step system
//!
//! ```text
//! F(γ) = γ − (Pᵀ Ω ⊗ I_d) f(u ⊗ q₀ + h c ⊗ q₀' + h² (L ⊗ I_d) γ) = 0
//! ```
//!
//! in the `r·d` Legendre coefficients `γ`. Three solvers are provided: plain
//! fixed-point sweeps, simplified Newton with the `rd × rd` matrix
//! `I − h² C ⊗ J₀`, and the blended iteration which only ever factors the
//! `d × d` matrix `I_d − ρ² h² J₀`.
//!
//! Every engine starts from `γ⁰ = Γ f(Υ)` and stops when the last correction
//! has max-norm `≤ tol`, when the residual is below `tol` or a few ulps of
//! `‖γ‖∞`, or after `max_iter` corrections. An engine that exhausts
//! `max_iter` while its corrections sit at the rounding floor reports
//! [`Termination::RoundoffLimited`], which callers treat as usable.

use nalgebra::{DMatrix, DVectorViewMut, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::coeffs::MethodCoefficients;
use crate::error::{invalid, Error, Result};
use crate::linalg::{kron, max_norm, spectral_radius};
use crate::solver::Force;

/// Multiple of machine epsilon (relative to `max(1, ‖γ‖∞)`) below which a
/// correction is indistinguishable from rounding noise.
pub const ROUNDOFF_FLOOR_ULPS: f64 = 64.0;

/// Ulps of `‖γ‖∞` below which a residual counts as zero.
pub const RESIDUAL_FLOOR_ULPS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IterationScheme {
    FixedPoint,
    SimplifiedNewton,
    /// Outer sweeps with `inner_iter` blended inner corrections each.
    BlendedOuterInner,
    /// Exactly one blended inner correction per outer sweep.
    BlendedSingleInner,
}

impl IterationScheme {
    pub fn needs_jacobian(self) -> bool {
        !matches!(self, IterationScheme::FixedPoint)
    }
}

/// How `J₀ = ∂f/∂q (q₀)` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum JacobianMode {
    /// The problem's analytic Jacobian, falling back to differences if it has none.
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub scheme: IterationScheme,
    pub tol: f64,
    pub max_iter: usize,
    /// Inner corrections per outer sweep; only read by `BlendedOuterInner`.
    pub inner_iter: usize,
    /// Stop once the correction norm has failed to decrease this many sweeps in a row.
    pub stagnation_window: Option<usize>,
    pub jacobian: JacobianMode,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            scheme: IterationScheme::BlendedSingleInner,
            tol: 1e-16,
            max_iter: 10_000,
            inner_iter: 2,
            stagnation_window: None,
            jacobian: JacobianMode::Analytic,
        }
    }
}

impl IterationConfig {
    pub fn with_scheme(scheme: IterationScheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        if self.inner_iter == 0 {
            return Err(invalid("inner_iter must be at least 1"));
        }
        if self.stagnation_window == Some(0) {
            return Err(invalid("stagnation window must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Termination {
    /// Residual or correction max-norm reached `tol`.
    #[default]
    Converged,
    /// The configured stagnation window fired.
    Stagnated,
    /// `max_iter` exhausted with corrections at the rounding floor.
    RoundoffLimited,
    /// `max_iter` exhausted above the rounding floor.
    MaxIterations,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    /// Corrections applied to `γ` (outer sweeps).
    pub outer_count: usize,
    /// Blended inner corrections, summed over outer sweeps.
    pub inner_count: usize,
    /// Evaluations of `f` at all `k` stages, including the initial guess.
    pub force_sweeps: usize,
    pub converged: bool,
    pub termination: Termination,
    pub final_update_norm: f64,
    /// Order of the largest matrix factored (0 for fixed-point).
    pub factorization_dim: usize,
}

impl IterationStats {
    /// Whether the returned iterate may be used to advance the solution.
    pub fn usable(&self) -> bool {
        self.termination != Termination::MaxIterations
    }
}

/// Evaluates `f` blockwise on a stacked vector of `d`-blocks.
pub fn eval_forces(f: &Force, stages: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; stages.len()];
    for (v, fv) in stages.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        f(v, fv)?;
    }
    Ok(out)
}

/// Per-step linear maps, rebuilt for every `(q₀, q₀', h, J₀)`.
///
/// * `Γ = Pᵀ Ω ⊗ I_d` ([`Self::project`])
/// * `Θ = h² L ⊗ I_d`, `v = Υ + Θ γ` ([`Self::stages`])
/// * `Υ = u ⊗ q₀ + h c ⊗ q₀'`
/// * `Λ = ρ² X⁻¹ ⊗ I_d`
/// * `J = ρ² h² J₀` and the weight `θ = I_r ⊗ (I_d − J)⁻¹`
/// * `M̃ = θ (I − h² X ⊗ J₀) + (I − θ)(Λ − I_r ⊗ J)`
pub struct StepOperators<'a> {
    coeffs: &'a MethodCoefficients,
    d: usize,
    h: f64,
    upsilon: Vec<f64>,
    j0: Option<DMatrix<f64>>,
    scaled_j: Option<DMatrix<f64>>,
    weight_lu: Option<LU<f64, Dyn, Dyn>>,
}

impl<'a> StepOperators<'a> {
    pub fn new(
        coeffs: &'a MethodCoefficients,
        q0: &[f64],
        qp0: &[f64],
        h: f64,
        j0: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let d = q0.len();
        if d == 0 || qp0.len() != d {
            return Err(invalid("q0 and q0' must be nonempty and of equal length"));
        }
        if !(h > 0.0) {
            return Err(invalid(format!("step size must be positive, got {h}")));
        }
        let mut upsilon = Vec::with_capacity(coeffs.k() * d);
        for &c in coeffs.nodes() {
            upsilon.extend(q0.iter().zip(qp0).map(|(q, qp)| q + h * c * qp));
        }
        let (scaled_j, weight_lu) = match &j0 {
            Some(j) => {
                if j.shape() != (d, d) {
                    return Err(invalid(format!(
                        "Jacobian is {:?}, expected {d}x{d}",
                        j.shape()
                    )));
                }
                let scaled = j * (coeffs.rho2() * h * h);
                let lu = (DMatrix::identity(d, d) - &scaled).lu();
                if !lu.is_invertible() {
                    return Err(Error::Singular {
                        matrix: "I - rho^2 h^2 J0",
                        h: Some(h),
                    });
                }
                (Some(scaled), Some(lu))
            }
            None => (None, None),
        };
        Ok(Self {
            coeffs,
            d,
            h,
            upsilon,
            j0,
            scaled_j,
            weight_lu,
        })
    }

    pub fn coeffs(&self) -> &MethodCoefficients {
        self.coeffs
    }
    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn upsilon(&self) -> &[f64] {
        &self.upsilon
    }
    pub fn jacobian(&self) -> Option<&DMatrix<f64>> {
        self.j0.as_ref()
    }

    fn require_j0(&self) -> Result<&DMatrix<f64>> {
        self.j0
            .as_ref()
            .ok_or_else(|| invalid("this scheme needs the Jacobian J0"))
    }

    /// `Γ f = (Pᵀ Ω ⊗ I_d) f`: `k·d` stage forces to `r·d` coefficients.
    pub fn project(&self, forces: &[f64]) -> Vec<f64> {
        kron_apply(self.coeffs.projection(), forces, self.d)
    }

    /// `v = Υ + h² (L ⊗ I_d) γ`.
    pub fn stages(&self, gamma: &[f64]) -> Vec<f64> {
        let mut v = kron_apply(self.coeffs.l(), gamma, self.d);
        let h2 = self.h * self.h;
        for (vi, ui) in v.iter_mut().zip(&self.upsilon) {
            *vi = ui + h2 * *vi;
        }
        v
    }

    /// `Λ η = ρ² (X⁻¹ ⊗ I_d) η`.
    pub fn lambda(&self, eta: &[f64]) -> Vec<f64> {
        let mut out = kron_apply(self.coeffs.x_inv(), eta, self.d);
        let rho2 = self.coeffs.rho2();
        out.iter_mut().for_each(|v| *v *= rho2);
        out
    }

    /// `θ w = (I_r ⊗ (I_d − ρ² h² J₀)⁻¹) w`, one `d × d` solve per block.
    pub fn weight(&self, w: &[f64]) -> Result<Vec<f64>> {
        let lu = self
            .weight_lu
            .as_ref()
            .ok_or_else(|| invalid("the blended weight needs the Jacobian J0"))?;
        let mut out = w.to_vec();
        for block in out.chunks_exact_mut(self.d) {
            let mut view = DVectorViewMut::from_slice(block, self.d);
            if !lu.solve_mut(&mut view) {
                return Err(Error::Singular {
                    matrix: "I - rho^2 h^2 J0",
                    h: Some(self.h),
                });
            }
        }
        Ok(out)
    }

    /// `M̃ Δ`.
    pub fn m_tilde(&self, delta: &[f64]) -> Result<Vec<f64>> {
        let j0 = self.require_j0()?;
        let scaled = self.scaled_j.as_ref().expect("set together with J0");
        let h2 = self.h * self.h;
        // (I − h² X ⊗ J₀) Δ
        let xj = block_apply(j0, &kron_apply(self.coeffs.x(), delta, self.d), self.d);
        let a: Vec<f64> = delta.iter().zip(&xj).map(|(v, w)| v - h2 * w).collect();
        let first = self.weight(&a)?;
        // (Λ − I_r ⊗ J) Δ
        let lam = self.lambda(delta);
        let jd = block_apply(scaled, delta, self.d);
        let y: Vec<f64> = lam.iter().zip(&jd).map(|(l, j)| l - j).collect();
        let wy = self.weight(&y)?;
        Ok(first
            .iter()
            .zip(y.iter().zip(&wy))
            .map(|(f, (y, wy))| f + (y - wy))
            .collect())
    }

    /// Dense `I_{rd} − h² C ⊗ J₀`.
    pub fn newton_matrix(&self, core: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let j0 = self.require_j0()?;
        let n = core.nrows() * self.d;
        Ok(DMatrix::identity(n, n) - kron(core, j0) * (self.h * self.h))
    }

    /// `γ⁰ = Γ f(Υ)`.
    pub fn initial_guess(&self, f: &Force) -> Result<Vec<f64>> {
        Ok(self.project(&eval_forces(f, &self.upsilon, self.d)?))
    }
}

/// `(A ⊗ I_d) x` for a stacked block vector `x`.
fn kron_apply(a: &DMatrix<f64>, x: &[f64], d: usize) -> Vec<f64> {
    let (rows, cols) = a.shape();
    debug_assert_eq!(x.len(), cols * d);
    let mut out = vec![0.0; rows * d];
    for i in 0..rows {
        let dst = &mut out[i * d..(i + 1) * d];
        for j in 0..cols {
            let a_ij = a[(i, j)];
            for (o, v) in dst.iter_mut().zip(&x[j * d..(j + 1) * d]) {
                *o += a_ij * v;
            }
        }
    }
    out
}

/// `(I ⊗ B) x`.
fn block_apply(b: &DMatrix<f64>, x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        for (i, o) in dst.iter_mut().enumerate() {
            *o = (0..d).map(|j| b[(i, j)] * src[j]).sum();
        }
    }
    out
}

/// `F(γ)` together with the stages and forces it was computed from.
#[derive(Debug, Clone)]
pub struct Residual {
    pub value: Vec<f64>,
    pub stages: Vec<f64>,
    pub forces: Vec<f64>,
}

/// `F(γ) = γ − Γ f(Υ + Θ γ)`.
pub fn residual(gamma: &[f64], ops: &StepOperators<'_>, f: &Force) -> Result<Residual> {
    let stages = ops.stages(gamma);
    let forces = eval_forces(f, &stages, ops.d)?;
    let projected = ops.project(&forces);
    let value = gamma.iter().zip(&projected).map(|(g, p)| g - p).collect();
    Ok(Residual {
        value,
        stages,
        forces,
    })
}

/// Rounding floor for corrections to `gamma`.
pub fn roundoff_floor(gamma: &[f64]) -> f64 {
    ROUNDOFF_FLOOR_ULPS * f64::EPSILON * max_norm(gamma).max(1.0)
}

/// Residuals at or below this level are indistinguishable from zero.
fn residual_floor(gamma: &[f64]) -> f64 {
    RESIDUAL_FLOOR_ULPS * f64::EPSILON * max_norm(gamma).max(1.0)
}

/// `max(tol, roundoff_floor(γ))`: the smallest residual a solve can certify.
pub fn effective_tol(tol: f64, gamma: &[f64]) -> f64 {
    tol.max(roundoff_floor(gamma))
}

struct Correction {
    next: Vec<f64>,
    norm: f64,
    inner: usize,
}

/// Shared outer loop. `correct` receives `γᵐ`, `η₁ = −F(γᵐ)` and the stage forces.
fn outer_loop<C>(
    ops: &StepOperators<'_>,
    f: &Force,
    config: &IterationConfig,
    factorization_dim: usize,
    mut correct: C,
) -> Result<(Vec<f64>, IterationStats)>
where
    C: FnMut(&[f64], &[f64], &[f64]) -> Result<Correction>,
{
    config.validate()?;
    let mut gamma = ops.initial_guess(f)?;
    let mut stats = IterationStats {
        force_sweeps: 1,
        factorization_dim,
        final_update_norm: f64::INFINITY,
        ..Default::default()
    };
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    loop {
        if stats.outer_count >= config.max_iter {
            stats.termination = if stats.final_update_norm <= roundoff_floor(&gamma) {
                Termination::RoundoffLimited
            } else {
                Termination::MaxIterations
            };
            break;
        }
        let res = residual(&gamma, ops, f)?;
        stats.force_sweeps += 1;
        let eta1: Vec<f64> = res.value.iter().map(|r| -r).collect();
        let res_norm = max_norm(&res.value);
        if res_norm <= config.tol.max(residual_floor(&gamma)) {
            stats.final_update_norm = res_norm;
            stats.termination = Termination::Converged;
            break;
        }
        let step = correct(&gamma, &eta1, &res.forces)?;
        gamma = step.next;
        stats.outer_count += 1;
        stats.inner_count += step.inner;
        stats.final_update_norm = step.norm;
        if step.norm <= config.tol {
            stats.termination = Termination::Converged;
            break;
        }
        if let Some(window) = config.stagnation_window {
            if step.norm < best {
                best = step.norm;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= window {
                    stats.termination = Termination::Stagnated;
                    break;
                }
            }
        }
    }
    stats.converged = stats.termination == Termination::Converged;
    Ok((gamma, stats))
}

/// `γ^{m+1} = Γ f(Υ + Θ γᵐ)`.
pub fn fixed_point_solve(
    ops: &StepOperators<'_>,
    f: &Force,
    config: &IterationConfig,
) -> Result<(Vec<f64>, IterationStats)> {
    outer_loop(ops, f, config, 0, |gamma, _eta1, forces| {
        let next = ops.project(forces);
        let norm = next
            .iter()
            .zip(gamma)
            .fold(0.0f64, |acc, (n, g)| acc.max((n - g).abs()));
        Ok(Correction {
            next,
            norm,
            inner: 0,
        })
    })
}

/// `(I − h² C ⊗ J₀) Δᵐ = −F(γᵐ)`, `γ^{m+1} = γᵐ + Δᵐ`, with the matrix factored once.
pub fn simplified_newton_solve(
    ops: &StepOperators<'_>,
    f: &Force,
    core: &DMatrix<f64>,
    config: &IterationConfig,
) -> Result<(Vec<f64>, IterationStats)> {
    let r = ops.coeffs.r();
    if core.shape() != (r, r) {
        return Err(invalid(format!(
            "Newton core matrix is {:?}, expected {r}x{r}",
            core.shape()
        )));
    }
    let lu = ops.newton_matrix(core)?.lu();
    if !lu.is_invertible() {
        return Err(Error::Singular {
            matrix: "simplified Newton",
            h: Some(ops.h),
        });
    }
    outer_loop(ops, f, config, r * ops.d, |gamma, eta1, _| {
        let delta = lu
            .solve(&nalgebra::DVector::from_column_slice(eta1))
            .ok_or(Error::Singular {
                matrix: "simplified Newton",
                h: Some(ops.h),
            })?;
        Ok(apply_delta(gamma, delta.as_slice(), 0))
    })
}

fn apply_delta(gamma: &[f64], delta: &[f64], inner: usize) -> Correction {
    Correction {
        next: gamma.iter().zip(delta).map(|(g, d)| g + d).collect(),
        norm: max_norm(delta),
        inner,
    }
}

/// The single blended correction `Δ = θ(η₂ + θ(η₁ − η₂))`.
pub fn blended_correction(ops: &StepOperators<'_>, eta1: &[f64]) -> Result<Vec<f64>> {
    let eta2 = ops.lambda(eta1);
    let w = ops.weight(&sub(eta1, &eta2))?;
    let s: Vec<f64> = eta2.iter().zip(&w).map(|(a, b)| a + b).collect();
    ops.weight(&s)
}

/// `inner` sweeps of `Δ^{j+1} = Δ^j − θ(M̃ Δ^j − η₂ − θ(η₁ − η₂))` from `Δ⁰ = 0`.
pub fn blended_inner_correction(
    ops: &StepOperators<'_>,
    eta1: &[f64],
    inner: usize,
) -> Result<Vec<f64>> {
    let eta2 = ops.lambda(eta1);
    let w = ops.weight(&sub(eta1, &eta2))?;
    let mut delta = vec![0.0; eta1.len()];
    for _ in 0..inner {
        let m = ops.m_tilde(&delta)?;
        let t: Vec<f64> = m
            .iter()
            .zip(eta2.iter().zip(&w))
            .map(|(m, (e2, w))| m - e2 - w)
            .collect();
        let corr = ops.weight(&t)?;
        delta = delta.iter().zip(&corr).map(|(d, c)| d - c).collect();
    }
    Ok(delta)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Blended iteration; `BlendedSingleInner` or `BlendedOuterInner` per `config.scheme`.
pub fn blended_solve(
    ops: &StepOperators<'_>,
    f: &Force,
    config: &IterationConfig,
) -> Result<(Vec<f64>, IterationStats)> {
    ops.require_j0()?;
    let single = match config.scheme {
        IterationScheme::BlendedSingleInner => true,
        IterationScheme::BlendedOuterInner => false,
        other => {
            return Err(invalid(format!(
                "blended_solve called with scheme {other:?}"
            )))
        }
    };
    outer_loop(ops, f, config, ops.d, |gamma, eta1, _| {
        if single {
            Ok(apply_delta(gamma, &blended_correction(ops, eta1)?, 1))
        } else {
            let delta = blended_inner_correction(ops, eta1, config.inner_iter)?;
            Ok(apply_delta(gamma, &delta, config.inner_iter))
        }
    })
}

/// Dispatches on `config.scheme`.
pub fn solve(
    ops: &StepOperators<'_>,
    f: &Force,
    config: &IterationConfig,
) -> Result<(Vec<f64>, IterationStats)> {
    match config.scheme {
        IterationScheme::FixedPoint => fixed_point_solve(ops, f, config),
        IterationScheme::SimplifiedNewton => {
            simplified_newton_solve(ops, f, ops.coeffs.newton_core(), config)
        }
        IterationScheme::BlendedOuterInner | IterationScheme::BlendedSingleInner => {
            blended_solve(ops, f, config)
        }
    }
}

/// Spectral radius of the single-inner blended iteration on `q'' = −μ² q`
/// with `nu2 = (hμ)²`, using the tabulated `ρ²` for `r`.
pub fn blended_spectral_radius(r: usize, nu2: f64) -> Result<f64> {
    blended_spectral_radius_with(r, nu2, crate::coeffs::rho_squared(r)?)
}

/// As [`blended_spectral_radius`] with an explicit blending parameter.
///
/// For `d = 1`, `h² J₀ = −nu2`, the error map is
/// `Z = I − θ(Λ + θ(I − Λ))(I + nu2 X)`, `θ = 1/(1 + ρ² nu2)`, `Λ = ρ² X⁻¹`.
pub fn blended_spectral_radius_with(r: usize, nu2: f64, rho2: f64) -> Result<f64> {
    if !(nu2 >= 0.0) {
        return Err(invalid(format!("nu2 must be nonnegative, got {nu2}")));
    }
    let x = crate::coeffs::build_x(r)?;
    let x_inv = x.clone().try_inverse().ok_or(Error::Singular {
        matrix: "X",
        h: None,
    })?;
    let id = DMatrix::<f64>::identity(r, r);
    let theta = 1.0 / (1.0 + rho2 * nu2);
    let lambda = x_inv * rho2;
    let jac = &id + &x * nu2;
    let z = &id - (&lambda + (&id - &lambda) * theta) * theta * jac;
    Ok(spectral_radius(&z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ForceError;
    use crate::oracles::{kron as dense_kron, matvec, solve_dense};
    use std::sync::Arc;

    fn coeffs() -> MethodCoefficients {
        MethodCoefficients::gauss(4, 2).unwrap()
    }

    fn linear_force(a: Vec<Vec<f64>>, g: Vec<f64>) -> Arc<Force> {
        Arc::new(move |q: &[f64], out: &mut [f64]| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = g[i] + a[i].iter().zip(q).map(|(x, y)| x * y).sum::<f64>();
            }
            Ok::<(), ForceError>(())
        })
    }

    fn to_dmatrix(a: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), a[0].len(), |i, j| a[i][j])
    }

    fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect()
    }

    fn cfg(scheme: IterationScheme) -> IterationConfig {
        IterationConfig::with_scheme(scheme)
    }

    #[test]
    fn zero_force_residual_is_identity() {
        let c = coeffs();
        let f = linear_force(vec![vec![0.0; 2]; 2], vec![0.0; 2]);
        let ops = StepOperators::new(&c, &[1.0, 2.0], &[0.5, -0.5], 0.1, None).unwrap();
        let gamma = vec![0.3, -0.2, 0.1, 0.7];
        assert_eq!(residual(&gamma, &ops, &*f).unwrap().value, gamma);
    }

    #[test]
    fn constant_force_is_fixed_after_one_projection() {
        let c = coeffs();
        let f = linear_force(vec![vec![0.0; 2]; 2], vec![0.25, -3.0]);
        let ops = StepOperators::new(&c, &[1.0, 2.0], &[0.5, -0.5], 0.1, None).unwrap();
        let gamma = ops.initial_guess(&*f).unwrap();
        let res = residual(&gamma, &ops, &*f).unwrap();
        assert!(max_norm(&res.value) < 1e-15);
        // γ₀ carries the constant, γ₁ vanishes by orthogonality.
        assert!((gamma[0] - 0.25).abs() < 1e-15 && (gamma[1] + 3.0).abs() < 1e-15);
        assert!(gamma[2].abs() < 1e-15 && gamma[3].abs() < 1e-15);
    }

    #[test]
    fn linear_residual_matches_dense_assembly() {
        let c = coeffs();
        let a = vec![vec![-2.0, 0.5], vec![0.3, -1.0]];
        let g = vec![0.1, -0.2];
        let f = linear_force(a.clone(), g.clone());
        let (q0, qp0, h) = ([0.4, -0.3], [1.0, 0.2], 0.3);
        let ops = StepOperators::new(&c, &q0, &qp0, h, None).unwrap();
        let gamma = vec![0.2, -0.1, 0.05, 0.3];

        // F(γ) = γ − (PᵀΩ⊗I)[(I_k⊗A)(Υ + h²(L⊗I)γ) + u⊗g], assembled densely.
        let id2 = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let proj = dense_kron(&rows(c.projection()), &id2);
        let lk = dense_kron(&rows(c.l()), &id2);
        let ik = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect::<Vec<Vec<f64>>>();
        let ia = dense_kron(&ik, &a);
        let mut upsilon = Vec::new();
        for &ci in c.nodes() {
            upsilon.extend([q0[0] + h * ci * qp0[0], q0[1] + h * ci * qp0[1]]);
        }
        let lg = matvec(&lk, &gamma);
        let v: Vec<f64> = upsilon
            .iter()
            .zip(&lg)
            .map(|(u, l)| u + h * h * l)
            .collect();
        let mut fv = matvec(&ia, &v);
        for (i, x) in fv.iter_mut().enumerate() {
            *x += g[i % 2];
        }
        let pf = matvec(&proj, &fv);
        let expect: Vec<f64> = gamma.iter().zip(&pf).map(|(x, y)| x - y).collect();
        let got = residual(&gamma, &ops, &*f).unwrap().value;
        for (x, y) in got.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn fixed_point_zero_force() {
        let c = coeffs();
        let f = linear_force(vec![vec![0.0; 2]; 2], vec![0.0; 2]);
        let ops = StepOperators::new(&c, &[1.0, 0.0], &[0.0, 1.0], 0.1, None).unwrap();
        let (gamma, stats) =
            fixed_point_solve(&ops, &*f, &cfg(IterationScheme::FixedPoint)).unwrap();
        assert!(gamma.iter().all(|&g| g == 0.0));
        assert!(stats.converged);
        assert_eq!(stats.force_sweeps, 2);
        assert_eq!(stats.outer_count, 0);
        assert_eq!(stats.factorization_dim, 0);
    }

    /// Dense oracle for the linear system `(I − h² C ⊗ A) γ = Γ f(Υ)` with `f = A q + g`.
    fn linear_gamma_oracle(
        c: &MethodCoefficients,
        a: &[Vec<f64>],
        g: &[f64],
        q0: &[f64],
        qp0: &[f64],
        h: f64,
    ) -> Vec<f64> {
        let d = q0.len();
        let core = rows(&(c.projection() * c.l()));
        let ka = dense_kron(&core, a);
        let n = c.r() * d;
        let m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (if i == j { 1.0 } else { 0.0 }) - h * h * ka[i][j])
                    .collect()
            })
            .collect();
        // rhs = Γ (A Υ + g)
        let mut fu = Vec::new();
        for &ci in c.nodes() {
            let v: Vec<f64> = (0..d).map(|i| q0[i] + h * ci * qp0[i]).collect();
            let av = matvec(a, &v);
            fu.extend(av.iter().zip(g).map(|(x, y)| x + y));
        }
        let id = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect::<Vec<Vec<f64>>>();
        let rhs = matvec(&dense_kron(&rows(c.projection()), &id), &fu);
        solve_dense(&m, &rhs)
    }

    #[test]
    fn fixed_point_scalar_oscillator_matches_linear_solve() {
        let c = coeffs();
        let mu2 = 4.0;
        let a = vec![vec![-mu2]];
        let f = linear_force(a.clone(), vec![0.0]);
        let (q0, qp0, h) = ([1.0], [0.5], 0.1);
        let ops = StepOperators::new(&c, &q0, &qp0, h, None).unwrap();
        let (gamma, stats) =
            fixed_point_solve(&ops, &*f, &cfg(IterationScheme::FixedPoint)).unwrap();
        assert!(stats.usable());
        let expect = linear_gamma_oracle(&c, &a, &[0.0], &q0, &qp0, h);
        for (x, y) in gamma.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn newton_is_exact_on_affine_force() {
        let c = coeffs();
        let a = vec![vec![-3.0, 1.0], vec![0.5, -2.0]];
        let g = vec![0.2, 0.1];
        let f = linear_force(a.clone(), g.clone());
        let (q0, qp0, h) = ([0.3, 0.7], [-0.2, 0.4], 0.2);
        let ops = StepOperators::new(&c, &q0, &qp0, h, Some(to_dmatrix(&a))).unwrap();
        let mut config = cfg(IterationScheme::SimplifiedNewton);
        config.tol = 1e-12;
        let (gamma, stats) = simplified_newton_solve(&ops, &*f, c.newton_core(), &config).unwrap();
        assert!(stats.converged);
        assert_eq!(stats.outer_count, 1);
        assert_eq!(stats.factorization_dim, 4);
        let expect = linear_gamma_oracle(&c, &a, &g, &q0, &qp0, h);
        for (x, y) in gamma.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14, "{x} vs {y}");
        }
    }

    #[test]
    fn newton_zero_force() {
        let c = coeffs();
        let f = linear_force(vec![vec![0.0; 2]; 2], vec![0.0; 2]);
        let ops = StepOperators::new(
            &c,
            &[1.0, 0.0],
            &[0.0, 1.0],
            0.1,
            Some(DMatrix::zeros(2, 2)),
        )
        .unwrap();
        let (gamma, stats) = simplified_newton_solve(
            &ops,
            &*f,
            c.newton_core(),
            &cfg(IterationScheme::SimplifiedNewton),
        )
        .unwrap();
        assert!(gamma.iter().all(|&g| g == 0.0));
        assert!(stats.converged);
        assert_eq!(stats.force_sweeps, 2);
    }

    #[test]
    fn newton_rejects_singular_matrix() {
        let c = coeffs();
        let f = linear_force(vec![vec![0.0]], vec![0.0]);
        // I − h² X J₀ is singular when h² J₀ = 1/λ for a real eigenvalue; X_2 has
        // none, so use a core with a known eigenvalue instead.
        let core = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let ops = StepOperators::new(
            &c,
            &[1.0],
            &[0.0],
            1.0,
            Some(DMatrix::from_element(1, 1, 1.0)),
        )
        .unwrap();
        let err =
            simplified_newton_solve(&ops, &*f, &core, &cfg(IterationScheme::SimplifiedNewton))
                .unwrap_err();
        assert!(matches!(err, Error::Singular { h: Some(_), .. }));
    }

    #[test]
    fn blended_weight_singularity_is_reported() {
        let c = coeffs();
        let h = 1.0;
        let j0 = DMatrix::from_element(1, 1, 1.0 / (c.rho2() * h * h));
        let err = StepOperators::new(&c, &[1.0], &[0.0], h, Some(j0))
            .err()
            .unwrap();
        assert!(matches!(err, Error::Singular { .. }));
    }

    #[test]
    fn weight_inverts_its_matrix() {
        let c = coeffs();
        let j0 = DMatrix::from_row_slice(2, 2, &[-3.0, 1.0, 0.4, -1.5]);
        let h = 0.7;
        let ops = StepOperators::new(&c, &[0.0, 0.0], &[0.0, 0.0], h, Some(j0.clone())).unwrap();
        let m = DMatrix::identity(2, 2) - &j0 * (c.rho2() * h * h);
        let w = [0.3, -1.2, 2.5, 0.01];
        let mw: Vec<f64> = w
            .chunks(2)
            .flat_map(|b| {
                let v = &m * nalgebra::DVector::from_column_slice(b);
                v.iter().copied().collect::<Vec<_>>()
            })
            .collect();
        let back = ops.weight(&mw).unwrap();
        for (x, y) in back.iter().zip(&w) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn blended_zero_force_reaches_zero() {
        let c = coeffs();
        let f = linear_force(vec![vec![0.0; 2]; 2], vec![0.0; 2]);
        let ops = StepOperators::new(
            &c,
            &[1.0, 0.0],
            &[0.0, 1.0],
            0.1,
            Some(DMatrix::zeros(2, 2)),
        )
        .unwrap();
        for scheme in [
            IterationScheme::BlendedSingleInner,
            IterationScheme::BlendedOuterInner,
        ] {
            let (gamma, stats) = blended_solve(&ops, &*f, &cfg(scheme)).unwrap();
            assert!(gamma.iter().all(|&g| g == 0.0));
            assert!(stats.converged);
            assert_eq!(stats.factorization_dim, 2);
        }
    }

    #[test]
    fn one_inner_sweep_is_bitwise_single_inner() {
        let c = coeffs();
        let j0 = DMatrix::from_row_slice(2, 2, &[-2.0, 0.3, 0.1, -0.7]);
        let ops = StepOperators::new(&c, &[0.5, 0.2], &[0.1, 0.9], 0.3, Some(j0)).unwrap();
        let eta1 = [1.25e-3, -7.5e-4, 3.1e-5, 2.2e-6];
        let a = blended_correction(&ops, &eta1).unwrap();
        let b = blended_inner_correction(&ops, &eta1, 1).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn blended_spectral_radius_behaviour() {
        assert!(blended_spectral_radius(2, 0.0).unwrap() < 1e-14);
        let rho2 = crate::coeffs::rho_squared(2).unwrap();
        let grid: Vec<f64> = (0..=200)
            .map(|i| 10f64.powf(-4.0 + 10.0 * i as f64 / 200.0))
            .collect();
        let max_at = |rho2: f64| {
            grid.iter()
                .map(|&nu2| blended_spectral_radius_with(2, nu2, rho2).unwrap())
                .fold(0.0, f64::max)
        };
        let base = max_at(rho2);
        assert!(base < 1.0, "{base}");
        assert!(max_at(4.0 * rho2) > base);
        assert!(max_at(0.25 * rho2) > base);
        assert!(blended_spectral_radius(2, -1.0).is_err());
    }

    #[test]
    fn spectral_radius_matches_operator_machinery() {
        // Assemble the error map column by column through StepOperators (d = 1).
        let c = MethodCoefficients::gauss(4, 3).unwrap();
        let r = 3;
        for &nu2 in &[0.1, 3.0, 250.0] {
            let h = 1.0;
            let ops = StepOperators::new(
                &c,
                &[0.0],
                &[0.0],
                h,
                Some(DMatrix::from_element(1, 1, -nu2)),
            )
            .unwrap();
            let a = DMatrix::<f64>::identity(r, r) + c.newton_core() * nu2;
            let mut z = DMatrix::zeros(r, r);
            for j in 0..r {
                let mut e = vec![0.0; r];
                e[j] = 1.0;
                let eta1: Vec<f64> = (&a * nalgebra::DVector::from_column_slice(&e))
                    .iter()
                    .map(|v| -v)
                    .collect();
                let delta = blended_correction(&ops, &eta1).unwrap();
                for i in 0..r {
                    z[(i, j)] = e[i] + delta[i];
                }
            }
            let direct = blended_spectral_radius_with(r, nu2, c.rho2()).unwrap();
            assert!((spectral_radius(&z) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = IterationConfig::default();
        assert!(c.validate().is_ok());
        c.tol = 0.0;
        assert!(c.validate().is_err());
        let c = IterationConfig {
            max_iter: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = IterationConfig {
            inner_iter: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn exhausted_iteration_is_reported() {
        // h² ρ(C) |A| well above one: fixed point diverges.
        let c = coeffs();
        let f = linear_force(vec![vec![-400.0]], vec![0.0]);
        let ops = StepOperators::new(&c, &[1.0], &[0.0], 1.0, None).unwrap();
        let config = IterationConfig {
            max_iter: 20,
            ..cfg(IterationScheme::FixedPoint)
        };
        let (_, stats) = fixed_point_solve(&ops, &*f, &config).unwrap();
        assert!(!stats.converged);
        assert_eq!(stats.termination, Termination::MaxIterations);
        assert!(!stats.usable());
        assert_eq!(stats.outer_count, 20);
    }
}
