//! Single steps and fixed-step integration of `q'' = f(q)`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coeffs::MethodCoefficients;
use crate::error::{invalid, Error, ForceError, Result};
use crate::iterate::{
    self, eval_forces, IterationConfig, IterationStats, JacobianMode, StepOperators,
};

/// `f(q)` written into the output slice.
pub type Force = dyn Fn(&[f64], &mut [f64]) -> std::result::Result<(), ForceError> + Send + Sync;
/// `∂f/∂q` written into a `d × d` matrix.
pub type JacobianFn =
    dyn Fn(&[f64], &mut DMatrix<f64>) -> std::result::Result<(), ForceError> + Send + Sync;
/// Exact solution `t ↦ (q(t), q'(t))`.
pub type ExactFn = dyn Fn(f64) -> (Vec<f64>, Vec<f64>) + Send + Sync;
pub type InvariantFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct Invariant {
    pub name: String,
    pub eval: Arc<InvariantFn>,
}

/// `q'' = f(q)`, `q(t₀) = q₀`, `q'(t₀) = q₀'` on `[t₀, t_end]`.
#[derive(Clone)]
pub struct SecondOrderIvp {
    pub dim: usize,
    pub force: Arc<Force>,
    pub jacobian: Option<Arc<JacobianFn>>,
    pub q0: Vec<f64>,
    pub qp0: Vec<f64>,
    pub t0: f64,
    pub t_end: f64,
    pub exact: Option<Arc<ExactFn>>,
    pub invariants: Vec<Invariant>,
}

impl std::fmt::Debug for SecondOrderIvp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecondOrderIvp")
            .field("dim", &self.dim)
            .field("q0", &self.q0)
            .field("qp0", &self.qp0)
            .field("t0", &self.t0)
            .field("t_end", &self.t_end)
            .field("jacobian", &self.jacobian.is_some())
            .field("exact", &self.exact.is_some())
            .field(
                "invariants",
                &self.invariants.iter().map(|i| &i.name).collect::<Vec<_>>(),
            )
            .finish()
    }
}

impl SecondOrderIvp {
    pub fn new(
        force: Arc<Force>,
        q0: Vec<f64>,
        qp0: Vec<f64>,
        t0: f64,
        t_end: f64,
    ) -> Result<Self> {
        let dim = q0.len();
        if dim == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        if qp0.len() != dim {
            return Err(invalid(format!(
                "q0 has {dim} components but q0' has {}",
                qp0.len()
            )));
        }
        let ivp = Self {
            dim,
            force,
            jacobian: None,
            q0,
            qp0,
            t0,
            t_end,
            exact: None,
            invariants: Vec::new(),
        };
        ivp.check_interval()?;
        Ok(ivp)
    }

    fn check_interval(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t_end.is_finite() && self.t_end >= self.t0) {
            return Err(invalid(format!(
                "bad interval [{}, {}]",
                self.t0, self.t_end
            )));
        }
        Ok(())
    }

    pub fn with_jacobian(mut self, jacobian: Arc<JacobianFn>) -> Self {
        self.jacobian = Some(jacobian);
        self
    }

    pub fn with_exact(mut self, exact: Arc<ExactFn>) -> Self {
        self.exact = Some(exact);
        self
    }

    pub fn with_invariant(mut self, name: impl Into<String>, eval: Arc<InvariantFn>) -> Self {
        self.invariants.push(Invariant {
            name: name.into(),
            eval,
        });
        self
    }

    pub fn with_interval(mut self, t0: f64, t_end: f64) -> Result<Self> {
        self.t0 = t0;
        self.t_end = t_end;
        self.check_interval()?;
        Ok(self)
    }

    pub fn eval_force(&self, q: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        (self.force)(q, &mut out)?;
        Ok(out)
    }

    /// `J₀` at `q`: analytic when requested and available, otherwise central differences.
    pub fn jacobian_at(&self, q: &[f64], mode: JacobianMode) -> Result<DMatrix<f64>> {
        match (&self.jacobian, mode) {
            (Some(jac), JacobianMode::Analytic) => {
                let mut m = DMatrix::zeros(self.dim, self.dim);
                jac(q, &mut m)?;
                Ok(m)
            }
            _ => finite_difference_jacobian(&*self.force, q),
        }
    }
}

/// Central differences, column by column, with step `√ε · max(1, |q_i|)`.
pub fn finite_difference_jacobian(force: &Force, q: &[f64]) -> Result<DMatrix<f64>> {
    let d = q.len();
    let mut m = DMatrix::zeros(d, d);
    let mut probe = q.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    for j in 0..d {
        let step = f64::EPSILON.sqrt() * q[j].abs().max(1.0);
        probe[j] = q[j] + step;
        force(&probe, &mut fp)?;
        probe[j] = q[j] - step;
        force(&probe, &mut fm)?;
        probe[j] = q[j];
        let width = (q[j] + step) - (q[j] - step);
        for i in 0..d {
            m[(i, j)] = (fp[i] - fm[i]) / width;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub q1: Vec<f64>,
    pub q1_prime: Vec<f64>,
    /// Legendre coefficients of the step; empty for steppers without them.
    pub gamma: Vec<f64>,
    pub stats: IterationStats,
    /// Stage whose iteration failed, for steppers that solve stages one at a time.
    pub failed_stage: Option<usize>,
}

/// One step of the collocation method.
///
/// ```text
/// q₁  = q + h q' + h² Σ (1 − c_l) b_l f(v_l)
/// q₁' = q'       + h  Σ b_l f(v_l)
/// ```
///
/// A step whose iteration was not usable is still returned; check
/// `stats.usable()`.
pub fn step(
    ivp: &SecondOrderIvp,
    q: &[f64],
    qp: &[f64],
    h: f64,
    coeffs: &MethodCoefficients,
    config: &IterationConfig,
) -> Result<StepOutput> {
    config.validate()?;
    if q.len() != ivp.dim || qp.len() != ivp.dim {
        return Err(invalid(format!("state must have {} components", ivp.dim)));
    }
    let j0 = if config.scheme.needs_jacobian() {
        Some(ivp.jacobian_at(q, config.jacobian)?)
    } else {
        None
    };
    let ops = StepOperators::new(coeffs, q, qp, h, j0)?;
    let (gamma, mut stats) = iterate::solve(&ops, &*ivp.force, config)?;
    let forces = eval_forces(&*ivp.force, &ops.stages(&gamma), ivp.dim)?;
    stats.force_sweeps += 1;

    let d = ivp.dim;
    let mut acc_q = vec![0.0; d];
    let mut acc_p = vec![0.0; d];
    for ((fl, &bb), &b) in forces.chunks_exact(d).zip(coeffs.b_bar()).zip(coeffs.b()) {
        for i in 0..d {
            acc_q[i] += bb * fl[i];
            acc_p[i] += b * fl[i];
        }
    }
    let h2 = h * h;
    let q1 = (0..d).map(|i| q[i] + h * qp[i] + h2 * acc_q[i]).collect();
    let q1_prime = (0..d).map(|i| qp[i] + h * acc_p[i]).collect();
    Ok(StepOutput {
        q1,
        q1_prime,
        gamma,
        stats,
        failed_stage: None,
    })
}

/// The update written in the Legendre coefficients:
/// `q₁ = q + h q' + h² (½ γ₀ − γ₁ / (2√3))`, `q₁' = q' + h γ₀`.
pub fn gamma_update(q: &[f64], qp: &[f64], h: f64, gamma: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = q.len();
    let (g0, g1) = (&gamma[..d], &gamma[d..2 * d]);
    let s = 0.5 / 3f64.sqrt();
    let q1 = (0..d)
        .map(|i| q[i] + h * qp[i] + h * h * (0.5 * g0[i] - s * g1[i]))
        .collect();
    let qp1 = (0..d).map(|i| qp[i] + h * g0[i]).collect();
    (q1, qp1)
}

/// Anything that can advance `(q, q')` by one step.
pub trait Stepper: Sync {
    fn step(&self, ivp: &SecondOrderIvp, q: &[f64], qp: &[f64], h: f64) -> Result<StepOutput>;
}

/// The collocation method with a fixed iteration configuration.
pub struct CollocationStepper<'a> {
    pub coeffs: &'a MethodCoefficients,
    pub config: IterationConfig,
}

impl Stepper for CollocationStepper<'_> {
    fn step(&self, ivp: &SecondOrderIvp, q: &[f64], qp: &[f64], h: f64) -> Result<StepOutput> {
        step(ivp, q, qp, h, self.coeffs, &self.config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: Vec<f64>,
    pub qp: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TotalStats {
    pub steps: usize,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub force_sweeps: usize,
    /// Steps that ended at `max_iter` with corrections at the rounding floor.
    pub roundoff_limited_steps: usize,
}

impl TotalStats {
    fn add(&mut self, s: &IterationStats) {
        self.steps += 1;
        self.outer_iterations += s.outer_count;
        self.inner_iterations += s.inner_count;
        self.force_sweeps += s.force_sweeps;
        if s.termination == iterate::Termination::RoundoffLimited {
            self.roundoff_limited_steps += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantDrift {
    pub name: String,
    pub initial: f64,
    /// `max_n |I(q_n, q_n') − I(q₀, q₀')|`.
    pub max_drift: f64,
    /// `|I(q_N, q_N') − I(q₀, q₀')|` at the final grid point.
    pub endpoint_deviation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Recording {
    #[default]
    Full,
    /// Keep only the initial and final states.
    EndpointOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub h: f64,
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub totals: TotalStats,
    pub invariant_drift: Vec<InvariantDrift>,
    /// Euclidean norm of the position error at `t_end`, when an exact solution is known.
    pub endpoint_error: Option<f64>,
}

impl Trajectory {
    pub fn final_state(&self) -> &State {
        self.states
            .last()
            .expect("trajectory holds at least the initial state")
    }

    pub fn drift(&self, name: &str) -> Option<&InvariantDrift> {
        self.invariant_drift.iter().find(|d| d.name == name)
    }
}

/// Number of uniform steps of size `h` covering the interval.
pub fn step_count(t0: f64, t_end: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::OutOfDomain {
            what: "h",
            value: h,
            domain: "(0, inf)",
        });
    }
    let n = (t_end - t0) / h;
    let rounded = n.round();
    if (n - rounded).abs() > 1e-8 {
        return Err(invalid(format!(
            "interval length {} is not a whole number of steps of {h}",
            t_end - t0
        )));
    }
    Ok(rounded as usize)
}

/// Collocation integration over `[t₀, t_end]`; aborts on the first unusable step.
pub fn integrate(
    ivp: &SecondOrderIvp,
    h: f64,
    coeffs: &MethodCoefficients,
    config: &IterationConfig,
) -> Result<Trajectory> {
    config.validate()?;
    let stepper = CollocationStepper {
        coeffs,
        config: config.clone(),
    };
    integrate_with(ivp, h, &stepper, Recording::Full)
}

pub fn integrate_with(
    ivp: &SecondOrderIvp,
    h: f64,
    stepper: &dyn Stepper,
    recording: Recording,
) -> Result<Trajectory> {
    let n = step_count(ivp.t0, ivp.t_end, h)?;
    let initial: Vec<f64> = ivp
        .invariants
        .iter()
        .map(|inv| (inv.eval)(&ivp.q0, &ivp.qp0))
        .collect();
    let mut drift: Vec<InvariantDrift> = ivp
        .invariants
        .iter()
        .zip(&initial)
        .map(|(inv, &v)| InvariantDrift {
            name: inv.name.clone(),
            initial: v,
            max_drift: 0.0,
            endpoint_deviation: 0.0,
        })
        .collect();

    let mut q = ivp.q0.clone();
    let mut qp = ivp.qp0.clone();
    let mut times = vec![ivp.t0];
    let mut states = vec![State {
        q: q.clone(),
        qp: qp.clone(),
    }];
    let mut totals = TotalStats::default();
    for i in 0..n {
        let out = stepper.step(ivp, &q, &qp, h)?;
        if !out.stats.usable() {
            return Err(Error::NonConvergence {
                step: i,
                stage: out.failed_stage,
                stats: out.stats,
            });
        }
        totals.add(&out.stats);
        q = out.q1;
        qp = out.q1_prime;
        for (inv, dr) in ivp.invariants.iter().zip(drift.iter_mut()) {
            let dev = ((inv.eval)(&q, &qp) - dr.initial).abs();
            dr.max_drift = dr.max_drift.max(dev);
            dr.endpoint_deviation = dev;
        }
        if recording == Recording::Full {
            times.push(ivp.t0 + (i + 1) as f64 * h);
            states.push(State {
                q: q.clone(),
                qp: qp.clone(),
            });
        }
    }
    if recording == Recording::EndpointOnly && n > 0 {
        times.push(ivp.t0 + n as f64 * h);
        states.push(State {
            q: q.clone(),
            qp: qp.clone(),
        });
    }
    let t_final = ivp.t0 + n as f64 * h;
    let endpoint_error = ivp.exact.as_ref().map(|exact| {
        let (qe, _) = exact(t_final);
        qe.iter()
            .zip(&q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    });
    Ok(Trajectory {
        h,
        times,
        states,
        totals,
        invariant_drift: drift,
        endpoint_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iterate::IterationScheme;

    fn constant_force(g: Vec<f64>) -> Arc<Force> {
        Arc::new(move |_q: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&g);
            Ok(())
        })
    }

    fn oscillator() -> SecondOrderIvp {
        let f: Arc<Force> = Arc::new(|q: &[f64], out: &mut [f64]| {
            out[0] = -q[0];
            Ok(())
        });
        SecondOrderIvp::new(f, vec![1.0], vec![0.0], 0.0, 1.0)
            .unwrap()
            .with_jacobian(Arc::new(|_q: &[f64], m: &mut DMatrix<f64>| {
                m[(0, 0)] = -1.0;
                Ok(())
            }))
            .with_exact(Arc::new(|t| (vec![t.cos()], vec![-t.sin()])))
            .with_invariant(
                "energy",
                Arc::new(|q: &[f64], p: &[f64]| 0.5 * (q[0] * q[0] + p[0] * p[0])),
            )
    }

    #[test]
    fn free_motion_is_exact() {
        let c = MethodCoefficients::gauss(4, 2).unwrap();
        let ivp = SecondOrderIvp::new(
            constant_force(vec![0.0, 0.0]),
            vec![1.0, 2.0],
            vec![0.5, -1.0],
            0.0,
            1.0,
        )
        .unwrap();
        for scheme in [
            IterationScheme::FixedPoint,
            IterationScheme::SimplifiedNewton,
            IterationScheme::BlendedSingleInner,
        ] {
            let out = step(
                &ivp,
                &[1.0, 2.0],
                &[0.5, -1.0],
                0.3,
                &c,
                &IterationConfig::with_scheme(scheme),
            )
            .unwrap();
            assert_eq!(out.q1, vec![1.0 + 0.3 * 0.5, 2.0 - 0.3]);
            assert_eq!(out.q1_prime, vec![0.5, -1.0]);
        }
    }

    #[test]
    fn constant_acceleration() {
        let c = MethodCoefficients::gauss(4, 2).unwrap();
        let g = vec![0.7, -9.81];
        let ivp = SecondOrderIvp::new(
            constant_force(g.clone()),
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            0.0,
            1.0,
        )
        .unwrap();
        let h = 0.25;
        let out = step(
            &ivp,
            &[0.0, 0.0],
            &[1.0, 1.0],
            h,
            &c,
            &IterationConfig::default(),
        )
        .unwrap();
        for i in 0..2 {
            assert!((out.q1[i] - (h + 0.5 * h * h * g[i])).abs() < 1e-15);
            assert!((out.q1_prime[i] - (1.0 + h * g[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn gamma_update_matches_stage_sum() {
        let c = MethodCoefficients::gauss(4, 2).unwrap();
        let ivp = oscillator();
        let out = step(&ivp, &[0.8], &[0.3], 0.2, &c, &IterationConfig::default()).unwrap();
        let (q1, qp1) = gamma_update(&[0.8], &[0.3], 0.2, &out.gamma);
        assert!((q1[0] - out.q1[0]).abs() < 1e-14);
        assert!((qp1[0] - out.q1_prime[0]).abs() < 1e-14);
    }

    #[test]
    fn zero_length_interval() {
        let c = MethodCoefficients::gauss(4, 2).unwrap();
        let ivp = oscillator().with_interval(0.0, 0.0).unwrap();
        let tr = integrate(&ivp, 0.1, &c, &IterationConfig::default()).unwrap();
        assert_eq!(tr.times.len(), 1);
        assert_eq!(tr.states.len(), 1);
        assert_eq!(tr.invariant_drift[0].max_drift, 0.0);
        assert_eq!(tr.endpoint_error, Some(0.0));
    }

    #[test]
    fn uniform_grid_and_drift_bookkeeping() {
        let c = MethodCoefficients::gauss(4, 2).unwrap();
        let ivp = oscillator();
        let tr = integrate(&ivp, 0.1, &c, &IterationConfig::default()).unwrap();
        assert_eq!(tr.times.len(), 11);
        assert_eq!(tr.states.len(), 11);
        for (i, t) in tr.times.iter().enumerate() {
            assert!((t - 0.1 * i as f64).abs() < 1e-15);
        }
        let d = &tr.invariant_drift[0];
        assert!(d.endpoint_deviation <= d.max_drift);
        assert!(tr.endpoint_error.unwrap() < 1e-6, "{:?}", tr.endpoint_error);
        assert_eq!(tr.totals.steps, 10);
    }

    #[test]
    fn rejects_non_uniform_grid() {
        let c = MethodCoefficients::gauss(4, 2).unwrap();
        let ivp = oscillator();
        assert!(integrate(&ivp, 0.3, &c, &IterationConfig::default()).is_err());
        assert!(integrate(&ivp, -0.1, &c, &IterationConfig::default()).is_err());
    }

    #[test]
    fn aborts_on_unusable_step() {
        let c = MethodCoefficients::gauss(4, 2).unwrap();
        let f: Arc<Force> = Arc::new(|q: &[f64], out: &mut [f64]| {
            out[0] = -400.0 * q[0];
            Ok(())
        });
        let ivp = SecondOrderIvp::new(f, vec![1.0], vec![0.0], 0.0, 2.0).unwrap();
        let config = IterationConfig {
            max_iter: 30,
            ..IterationConfig::with_scheme(IterationScheme::FixedPoint)
        };
        match integrate(&ivp, 1.0, &c, &config) {
            Err(Error::NonConvergence { step, .. }) => assert_eq!(step, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn force_failure_propagates() {
        let c = MethodCoefficients::gauss(4, 2).unwrap();
        let f: Arc<Force> = Arc::new(|_q: &[f64], _out: &mut [f64]| Err(ForceError::new("boom")));
        let ivp = SecondOrderIvp::new(f, vec![1.0], vec![0.0], 0.0, 1.0).unwrap();
        assert!(matches!(
            integrate(&ivp, 0.5, &c, &IterationConfig::default()),
            Err(Error::Force(_))
        ));
    }

    #[test]
    fn finite_differences() {
        let a = [[2.0, -1.0, 0.5], [0.0, 3.0, 1.0], [4.0, 0.25, -2.0]];
        let f = move |q: &[f64], out: &mut [f64]| {
            for i in 0..3 {
                out[i] = (0..3).map(|j| a[i][j] * q[j]).sum();
            }
            Ok(())
        };
        let m = finite_difference_jacobian(&f, &[0.3, -2.0, 10.0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[(i, j)] - a[i][j]).abs() <= 1e-8 * a[i][j].abs().max(1.0));
            }
        }
        let g = |_q: &[f64], out: &mut [f64]| {
            out.fill(1.5);
            Ok(())
        };
        let z = finite_difference_jacobian(&g, &[1.0, 2.0]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ivp_validation() {
        let f = constant_force(vec![0.0]);
        assert!(SecondOrderIvp::new(f.clone(), vec![], vec![], 0.0, 1.0).is_err());
        assert!(SecondOrderIvp::new(f.clone(), vec![1.0], vec![1.0, 2.0], 0.0, 1.0).is_err());
        assert!(SecondOrderIvp::new(f, vec![1.0], vec![1.0], 1.0, 0.0).is_err());
    }
}
