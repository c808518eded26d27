//! Runge–Kutta–Nyström Fourier collocation methods for `q'' = f(q)`.
//!
//! The stage polynomial is expanded in an orthonormal shifted Legendre basis
//! and truncated after `r` terms; the `k`-point quadrature that evaluates the
//! expansion coefficients gives a `k`-stage implicit RKN method. The per-step
//! system is solved in the `r·d` Legendre coefficients `γ` by fixed-point
//! iteration, simplified Newton, or the blended iteration, which only factors
//! a `d × d` matrix per step.
//!
//! ```no_run
//! use rknfc::{coeffs::MethodCoefficients, iterate::IterationConfig, problems, solver};
//!
//! let spec = problems::perturbed_kepler(1e-3)?.with_interval(0.0, 10.0)?;
//! let coeffs = MethodCoefficients::gauss(4, 2)?;
//! let tr = solver::integrate(&spec.ivp, 0.1, &coeffs, &IterationConfig::default())?;
//! println!("error at t = 10: {:e}", tr.endpoint_error.unwrap());
//! # Ok::<(), rknfc::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod coeffs;
pub mod dirkn;
pub mod error;
pub mod iterate;
pub mod legendre;
pub mod linalg;
pub mod matrix_text;
pub mod problems;
pub mod solver;

#[cfg(test)]
#[path = "../tests/common/oracles.rs"]
mod oracles;

pub use coeffs::{build_coefficients, rho_squared, MethodCoefficients};
pub use error::{Error, ForceError, Result};
pub use iterate::{IterationConfig, IterationScheme, IterationStats, JacobianMode, Termination};
pub use legendre::{gauss_legendre_rule, QuadratureRule};
pub use solver::{integrate, step, SecondOrderIvp, StepOutput, Trajectory};
