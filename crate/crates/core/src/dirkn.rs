//! Diagonally implicit RKN methods with externally supplied coefficients.
//!
//! Tableau file layout (`#` starts a comment line, blank lines ignored):
//!
//! ```text
//! s order
//! c_1 … c_s
//! ā_11 … ā_ss            (diagonal)
//! ā_21                   (strictly lower rows, row i has i−1 entries)
//! ā_31 ā_32
//! …
//! b̄_1 … b̄_s
//! b_1 … b_s
//! ```
//!
//! Stage `i` solves `Q_i = q + c_i h q' + h² Σ_{j<i} ā_ij f(Q_j) + h² ā_ii f(Q_i)`
//! by fixed-point iteration; the update is
//! `q₁ = q + h q' + h² Σ b̄_i f(Q_i)`, `q₁' = q' + h Σ b_i f(Q_i)`.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::iterate::{roundoff_floor, IterationConfig, IterationStats, Termination};
use crate::linalg::max_norm;
use crate::solver::{SecondOrderIvp, StepOutput, Stepper};

/// Order conditions are checked algebraically up to this order.
pub const MAX_ALGEBRAIC_ORDER: usize = 4;
const CONDITION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DirknTableau {
    s: usize,
    order: usize,
    c: Vec<f64>,
    /// Full lower-triangular `ā`, diagonal included.
    a_bar: DMatrix<f64>,
    b_bar: Vec<f64>,
    b: Vec<f64>,
}

impl DirknTableau {
    /// Builds and validates a tableau. `a_bar` must be lower triangular.
    pub fn new(
        order: usize,
        c: Vec<f64>,
        a_bar: DMatrix<f64>,
        b_bar: Vec<f64>,
        b: Vec<f64>,
    ) -> Result<Self> {
        let s = c.len();
        if s == 0 {
            return Err(invalid("tableau needs at least one stage"));
        }
        if order == 0 {
            return Err(invalid("declared order must be at least 1"));
        }
        if a_bar.shape() != (s, s) || b_bar.len() != s || b.len() != s {
            return Err(invalid(format!(
                "inconsistent tableau sizes for {s} stages"
            )));
        }
        let finite = c
            .iter()
            .chain(a_bar.iter())
            .chain(&b_bar)
            .chain(&b)
            .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("tableau entries must be finite"));
        }
        for i in 0..s {
            for j in i + 1..s {
                if a_bar[(i, j)] != 0.0 {
                    return Err(invalid(format!(
                        "a_bar[{i}][{j}] above the diagonal is nonzero"
                    )));
                }
            }
        }
        let t = Self {
            s,
            order,
            c,
            a_bar,
            b_bar,
            b,
        };
        t.check_order_conditions()?;
        t.check_linear_order()?;
        Ok(t)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut last_line = 0;
        let mut next_row = |want: Option<usize>, what: &str| -> Result<Vec<f64>> {
            let (line, text) = lines.next().ok_or_else(|| Error::Parse {
                line: last_line,
                message: format!("missing {what}"),
            })?;
            last_line = line;
            let vals = text
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line,
                    message: format!("{what}: {e}"),
                })?;
            if let Some(n) = want {
                if vals.len() != n {
                    return Err(Error::Parse {
                        line,
                        message: format!("{what}: expected {n} entries, found {}", vals.len()),
                    });
                }
            }
            Ok(vals)
        };
        let head = next_row(Some(2), "header 's order'")?;
        let as_count = |v: f64, what: &str| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v < 1e6 {
                Ok(v as usize)
            } else {
                Err(Error::Parse {
                    line: 1,
                    message: format!("{what} must be a positive integer, got {v}"),
                })
            }
        };
        let s = as_count(head[0], "s")?;
        let order = as_count(head[1], "order")?;
        let c = next_row(Some(s), "c")?;
        let diag = next_row(Some(s), "diagonal")?;
        let mut a_bar = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag));
        for i in 1..s {
            let row = next_row(Some(i), "a_bar row")?;
            for (j, v) in row.into_iter().enumerate() {
                a_bar[(i, j)] = v;
            }
        }
        let b_bar = next_row(Some(s), "b_bar")?;
        let b = next_row(Some(s), "b")?;
        if let Some((line, _)) = lines.next() {
            return Err(Error::Parse {
                line,
                message: "unexpected trailing data".into(),
            });
        }
        Self::new(order, c, a_bar, b_bar, b)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn stages(&self) -> usize {
        self.s
    }
    pub fn order(&self) -> usize {
        self.order
    }
    pub fn c(&self) -> &[f64] {
        &self.c
    }
    pub fn a_bar(&self) -> &DMatrix<f64> {
        &self.a_bar
    }
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.s).map(|i| self.a_bar[(i, i)]).collect()
    }
    pub fn b_bar(&self) -> &[f64] {
        &self.b_bar
    }
    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Residuals of the special-RKN order conditions up to `min(order, 4)`,
    /// as `(label, residual)` pairs.
    pub fn order_condition_residuals(&self) -> Vec<(&'static str, f64)> {
        let s = self.s;
        let (b, bb, c) = (&self.b, &self.b_bar, &self.c);
        let a1: Vec<f64> = (0..s).map(|i| self.a_bar.row(i).sum()).collect();
        let ac: Vec<f64> = (0..s)
            .map(|i| (0..s).map(|j| self.a_bar[(i, j)] * c[j]).sum())
            .collect();
        let dot = |u: &[f64], f: &dyn Fn(usize) -> f64| (0..s).map(|i| u[i] * f(i)).sum::<f64>();
        let mut out = Vec::new();
        let p = self.order.min(MAX_ALGEBRAIC_ORDER);
        if p >= 1 {
            out.push(("sum b = 1", dot(b, &|_| 1.0) - 1.0));
        }
        if p >= 2 {
            out.push(("sum b c = 1/2", dot(b, &|i| c[i]) - 0.5));
            out.push(("sum b_bar = 1/2", dot(bb, &|_| 1.0) - 0.5));
        }
        if p >= 3 {
            out.push(("sum b c^2 = 1/3", dot(b, &|i| c[i] * c[i]) - 1.0 / 3.0));
            out.push(("sum b a_bar 1 = 1/6", dot(b, &|i| a1[i]) - 1.0 / 6.0));
            out.push(("sum b_bar c = 1/6", dot(bb, &|i| c[i]) - 1.0 / 6.0));
        }
        if p >= 4 {
            out.push(("sum b c^3 = 1/4", dot(b, &|i| c[i].powi(3)) - 0.25));
            out.push(("sum b c a_bar 1 = 1/8", dot(b, &|i| c[i] * a1[i]) - 0.125));
            out.push(("sum b a_bar c = 1/24", dot(b, &|i| ac[i]) - 1.0 / 24.0));
            out.push((
                "sum b_bar c^2 = 1/12",
                dot(bb, &|i| c[i] * c[i]) - 1.0 / 12.0,
            ));
            out.push(("sum b_bar a_bar 1 = 1/24", dot(bb, &|i| a1[i]) - 1.0 / 24.0));
        }
        out
    }

    fn check_order_conditions(&self) -> Result<()> {
        for (label, res) in self.order_condition_residuals() {
            if res.abs() > CONDITION_TOL {
                return Err(invalid(format!(
                    "order condition '{label}' violated by {res:e} for declared order {}",
                    self.order
                )));
            }
        }
        Ok(())
    }

    /// Position and velocity errors of one step of `q'' = q` from `(1, 0)`,
    /// with the linear stage equations solved directly.
    fn linear_local_error(&self, h: f64) -> [f64; 2] {
        let h2 = h * h;
        let mut stage = vec![0.0; self.s];
        for i in 0..self.s {
            let explicit: f64 = (0..i).map(|j| self.a_bar[(i, j)] * stage[j]).sum();
            stage[i] = (1.0 + h2 * explicit) / (1.0 - h2 * self.a_bar[(i, i)]);
        }
        let q1 = 1.0 + h2 * (0..self.s).map(|i| self.b_bar[i] * stage[i]).sum::<f64>();
        let p1 = h * (0..self.s).map(|i| self.b[i] * stage[i]).sum::<f64>();
        [(q1 - h.cosh()).abs(), (p1 - h.sinh()).abs()]
    }

    /// Local errors on `q'' = q` must shrink at least like `h^{order + 1/2}`
    /// in both components.
    fn check_linear_order(&self) -> Result<()> {
        let e1 = self.linear_local_error(0.1);
        let e2 = self.linear_local_error(0.05);
        for (a, b) in e1.into_iter().zip(e2) {
            if !(a.is_finite() && b.is_finite()) {
                return Err(invalid("tableau breaks down on q'' = q"));
            }
            if b <= 1e-14 {
                continue;
            }
            let observed = (a / b).log2() - 1.0;
            if observed < self.order as f64 - 0.5 {
                return Err(invalid(format!(
                    "observed order {observed:.2} on q'' = q is below the declared order {}",
                    self.order
                )));
            }
        }
        Ok(())
    }
}

/// One DIRKN step; stages are solved in sequence by fixed-point iteration.
///
/// `stats.outer_count` sums the sweeps of all stages. A stage that exhausts
/// `max_iter` above the rounding floor ends the step early with
/// `failed_stage` set.
pub fn dirkn_step(
    tableau: &DirknTableau,
    ivp: &SecondOrderIvp,
    q: &[f64],
    qp: &[f64],
    h: f64,
    config: &IterationConfig,
) -> Result<StepOutput> {
    config.validate()?;
    let d = ivp.dim;
    if q.len() != d || qp.len() != d {
        return Err(invalid(format!("state must have {d} components")));
    }
    if !(h > 0.0) {
        return Err(invalid(format!("step size must be positive, got {h}")));
    }
    let h2 = h * h;
    let s = tableau.s;
    let mut forces: Vec<Vec<f64>> = Vec::with_capacity(s);
    let mut stats = IterationStats {
        final_update_norm: 0.0,
        ..Default::default()
    };
    let mut scratch = vec![0.0; d];
    for i in 0..s {
        let mut base: Vec<f64> = (0..d).map(|m| q[m] + tableau.c[i] * h * qp[m]).collect();
        for (j, fj) in forces.iter().enumerate() {
            let a = tableau.a_bar[(i, j)];
            for m in 0..d {
                base[m] += h2 * a * fj[m];
            }
        }
        let diag = tableau.a_bar[(i, i)];
        let mut stage = base.clone();
        (ivp.force)(&stage, &mut scratch)?;
        stats.force_sweeps += 1;
        if diag != 0.0 {
            let mut iterations = 0;
            let mut best = f64::INFINITY;
            let mut since_best = 0;
            let termination = loop {
                if iterations >= config.max_iter {
                    break if stats.final_update_norm <= roundoff_floor(&stage) {
                        Termination::RoundoffLimited
                    } else {
                        Termination::MaxIterations
                    };
                }
                let next: Vec<f64> = (0..d).map(|m| base[m] + h2 * diag * scratch[m]).collect();
                let delta = next
                    .iter()
                    .zip(&stage)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                stage = next;
                iterations += 1;
                stats.final_update_norm = delta;
                (ivp.force)(&stage, &mut scratch)?;
                stats.force_sweeps += 1;
                if delta <= config.tol {
                    break Termination::Converged;
                }
                if let Some(window) = config.stagnation_window {
                    if delta < best {
                        best = delta;
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= window {
                            break Termination::Stagnated;
                        }
                    }
                }
            };
            stats.outer_count += iterations;
            if termination as u8 > stats.termination as u8 {
                stats.termination = termination;
            }
            if termination == Termination::MaxIterations {
                stats.converged = false;
                return Ok(StepOutput {
                    q1: q.to_vec(),
                    q1_prime: qp.to_vec(),
                    gamma: Vec::new(),
                    stats,
                    failed_stage: Some(i),
                });
            }
        }
        forces.push(scratch.clone());
    }
    stats.converged = stats.termination == Termination::Converged;
    let mut q1: Vec<f64> = (0..d).map(|m| q[m] + h * qp[m]).collect();
    let mut q1_prime = qp.to_vec();
    for (i, fi) in forces.iter().enumerate() {
        for m in 0..d {
            q1[m] += h2 * tableau.b_bar[i] * fi[m];
            q1_prime[m] += h * tableau.b[i] * fi[m];
        }
    }
    debug_assert!(max_norm(&q1).is_finite() || !max_norm(q).is_finite());
    Ok(StepOutput {
        q1,
        q1_prime,
        gamma: Vec::new(),
        stats,
        failed_stage: None,
    })
}

pub struct DirknStepper<'a> {
    pub tableau: &'a DirknTableau,
    pub config: IterationConfig,
}

impl Stepper for DirknStepper<'_> {
    fn step(&self, ivp: &SecondOrderIvp, q: &[f64], qp: &[f64], h: f64) -> Result<StepOutput> {
        dirkn_step(self.tableau, ivp, q, qp, h, &self.config)
    }
}
