//! Benchmark problems and a name-keyed registry.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{invalid, ForceError, Result};
use crate::solver::SecondOrderIvp;

pub const KEPLER: &str = "kepler";
pub const HENON_HEILES: &str = "henon-heiles";
pub const HAMILTONIAN: &str = "hamiltonian";
pub const ANGULAR_MOMENTUM: &str = "angular_momentum";

/// Eccentricity-like perturbation used in the benchmark tables.
pub const KEPLER_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub ivp: SecondOrderIvp,
    /// Named invariant values at the initial state.
    pub reference_values: BTreeMap<String, f64>,
}

impl ProblemSpec {
    pub fn with_interval(mut self, t0: f64, t_end: f64) -> Result<Self> {
        self.ivp = self.ivp.with_interval(t0, t_end)?;
        Ok(self)
    }
}

/// Kepler flow with an `ε`-dependent `1/r⁵` correction whose exact solution is
/// the circle `q(t) = (cos ωt, sin ωt)`, `ω = 1 + ε`.
///
/// ```text
/// q'' = −q / r³ − (2ε + ε²) q / r⁵
/// H   = ½|q'|² − 1/r − (2ε + ε²) / (3 r³)
/// L   = q₁ q₂' − q₂ q₁'
/// ```
pub fn perturbed_kepler(epsilon: f64) -> Result<ProblemSpec> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(crate::error::Error::OutOfDomain {
            what: "epsilon",
            value: epsilon,
            domain: "[0, inf)",
        });
    }
    let kappa = 2.0 * epsilon + epsilon * epsilon;
    let omega = 1.0 + epsilon;

    let force = Arc::new(move |q: &[f64], out: &mut [f64]| {
        let r2 = q[0] * q[0] + q[1] * q[1];
        if r2 == 0.0 {
            return Err(ForceError::new("Kepler force is singular at r = 0"));
        }
        let r = r2.sqrt();
        let a = 1.0 / (r2 * r) + kappa / (r2 * r2 * r);
        out[0] = -a * q[0];
        out[1] = -a * q[1];
        Ok(())
    });
    let jacobian = Arc::new(move |q: &[f64], m: &mut DMatrix<f64>| {
        let r2 = q[0] * q[0] + q[1] * q[1];
        if r2 == 0.0 {
            return Err(ForceError::new("Kepler Jacobian is singular at r = 0"));
        }
        let r = r2.sqrt();
        let r3 = r2 * r;
        let r5 = r3 * r2;
        let a = 1.0 / r3 + kappa / r5;
        let s = 3.0 / r5 + 5.0 * kappa / (r5 * r2);
        for i in 0..2 {
            for j in 0..2 {
                m[(i, j)] = s * q[i] * q[j] - if i == j { a } else { 0.0 };
            }
        }
        Ok(())
    });
    let hamiltonian = move |q: &[f64], p: &[f64]| {
        let r2 = q[0] * q[0] + q[1] * q[1];
        let r = r2.sqrt();
        0.5 * (p[0] * p[0] + p[1] * p[1]) - 1.0 / r - kappa / (3.0 * r2 * r)
    };
    let angular = |q: &[f64], p: &[f64]| q[0] * p[1] - q[1] * p[0];

    let q0 = vec![1.0, 0.0];
    let qp0 = vec![0.0, omega];
    let mut reference_values = BTreeMap::new();
    reference_values.insert(
        HAMILTONIAN.to_string(),
        0.5 * omega * omega - 1.0 - kappa / 3.0,
    );
    reference_values.insert(ANGULAR_MOMENTUM.to_string(), omega);

    let ivp = SecondOrderIvp::new(force, q0, qp0, 0.0, 50.0)?
        .with_jacobian(jacobian)
        .with_exact(Arc::new(move |t| {
            let (s, c) = (omega * t).sin_cos();
            (vec![c, s], vec![-omega * s, omega * c])
        }))
        .with_invariant(HAMILTONIAN, Arc::new(hamiltonian))
        .with_invariant(ANGULAR_MOMENTUM, Arc::new(angular));
    Ok(ProblemSpec {
        name: KEPLER.to_string(),
        ivp,
        reference_values,
    })
}

/// Hénon–Heiles potential `V = ½(q₁² + q₂²) + q₁² q₂ − q₂³/3` from
/// `q = (√(11/96), 0)`, `q' = (0, 1/4)`.
pub fn henon_heiles() -> ProblemSpec {
    let force = Arc::new(|q: &[f64], out: &mut [f64]| {
        out[0] = -q[0] - 2.0 * q[0] * q[1];
        out[1] = -q[1] - q[0] * q[0] + q[1] * q[1];
        Ok(())
    });
    let jacobian = Arc::new(|q: &[f64], m: &mut DMatrix<f64>| {
        m[(0, 0)] = -1.0 - 2.0 * q[1];
        m[(0, 1)] = -2.0 * q[0];
        m[(1, 0)] = -2.0 * q[0];
        m[(1, 1)] = -1.0 + 2.0 * q[1];
        Ok(())
    });
    let hamiltonian = |q: &[f64], p: &[f64]| {
        0.5 * (p[0] * p[0] + p[1] * p[1]) + 0.5 * (q[0] * q[0] + q[1] * q[1]) + q[0] * q[0] * q[1]
            - q[1] * q[1] * q[1] / 3.0
    };
    let q0 = vec![(11.0f64 / 96.0).sqrt(), 0.0];
    let qp0 = vec![0.0, 0.25];
    let mut reference_values = BTreeMap::new();
    reference_values.insert(HAMILTONIAN.to_string(), 17.0 / 192.0);
    let ivp = SecondOrderIvp::new(force, q0, qp0, 0.0, 50.0)
        .expect("valid initial data")
        .with_jacobian(jacobian)
        .with_invariant(HAMILTONIAN, Arc::new(hamiltonian));
    ProblemSpec {
        name: HENON_HEILES.to_string(),
        ivp,
        reference_values,
    }
}

pub type ProblemFactory = dyn Fn() -> Result<ProblemSpec> + Send + Sync;

/// Problems looked up by name; starts with the built-in benchmarks.
#[derive(Clone)]
pub struct Registry {
    entries: BTreeMap<String, Arc<ProblemFactory>>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut reg = Self {
            entries: BTreeMap::new(),
        };
        reg.register(KEPLER, Arc::new(|| perturbed_kepler(KEPLER_EPSILON)));
        reg.register(HENON_HEILES, Arc::new(|| Ok(henon_heiles())));
        reg
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a problem.
    pub fn register(&mut self, name: impl Into<String>, factory: Arc<ProblemFactory>) {
        self.entries.insert(name.into(), factory);
    }

    pub fn get(&self, name: &str) -> Result<ProblemSpec> {
        let factory = self.entries.get(name).ok_or_else(|| {
            invalid(format!(
                "unknown problem '{name}' (known: {})",
                self.names().join(", ")
            ))
        })?;
        factory()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

/// Looks up a built-in problem.
pub fn problem_by_name(name: &str) -> Result<ProblemSpec> {
    Registry::default().get(name)
}
