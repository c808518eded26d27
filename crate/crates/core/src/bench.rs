//! Experiment runner for the benchmark tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::MethodCoefficients;
use crate::dirkn::{DirknStepper, DirknTableau};
use crate::error::{invalid, Error, Result};
use crate::iterate::{IterationConfig, IterationScheme, JacobianMode};
use crate::problems::{Registry, ANGULAR_MOMENTUM, HAMILTONIAN, HENON_HEILES, KEPLER};
use crate::solver::{
    integrate_with, step_count, CollocationStepper, Recording, Stepper, Trajectory,
};

/// Refinement factor of the reference run used when no exact solution exists.
pub const REFERENCE_REFINEMENT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Collocation with the single-inner blended iteration.
    #[serde(rename = "rkn-tfc-b")]
    RknTfcB,
    #[serde(rename = "rkn-tfc-f")]
    RknTfcF,
    #[serde(rename = "rkn-tfc-n")]
    RknTfcN,
    /// Collocation with the outer-inner blended iteration.
    #[serde(rename = "rkn-tfc-oi")]
    RknTfcOi,
    /// Diagonally implicit RKN from a tableau file, fixed-point stages.
    #[serde(rename = "dirkn-f")]
    DirknF,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::RknTfcB,
        Method::RknTfcF,
        Method::RknTfcN,
        Method::RknTfcOi,
        Method::DirknF,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::RknTfcB => "rkn-tfc-b",
            Method::RknTfcF => "rkn-tfc-f",
            Method::RknTfcN => "rkn-tfc-n",
            Method::RknTfcOi => "rkn-tfc-oi",
            Method::DirknF => "dirkn-f",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::RknTfcB => "RKN-TFC-B",
            Method::RknTfcF => "RKN-TFC-F",
            Method::RknTfcN => "RKN-TFC-N",
            Method::RknTfcOi => "RKN-TFC-OI",
            Method::DirknF => "DIRKN-F",
        }
    }

    pub fn scheme(self) -> IterationScheme {
        match self {
            Method::RknTfcB => IterationScheme::BlendedSingleInner,
            Method::RknTfcF | Method::DirknF => IterationScheme::FixedPoint,
            Method::RknTfcN => IterationScheme::SimplifiedNewton,
            Method::RknTfcOi => IterationScheme::BlendedOuterInner,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s || m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub problem: String,
    pub method: Method,
    pub t_end: f64,
    pub h: f64,
    pub k: usize,
    pub r: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub inner_iter: usize,
    pub stagnation_window: Option<usize>,
    pub jacobian: JacobianMode,
    pub tableau: Option<PathBuf>,
    /// Timed repetitions; the median is reported.
    pub repetitions: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        let it = IterationConfig::default();
        Self {
            problem: KEPLER.to_string(),
            method: Method::RknTfcB,
            t_end: 50.0,
            h: 0.1,
            k: 4,
            r: 2,
            tol: it.tol,
            max_iter: it.max_iter,
            inner_iter: it.inner_iter,
            stagnation_window: it.stagnation_window,
            jacobian: it.jacobian,
            tableau: None,
            repetitions: 3,
        }
    }
}

impl ExperimentPlan {
    pub fn new(problem: &str, method: Method, t_end: f64, h: f64) -> Self {
        Self {
            problem: problem.to_string(),
            method,
            t_end,
            h,
            ..Self::default()
        }
    }

    pub fn iteration_config(&self) -> IterationConfig {
        IterationConfig {
            scheme: self.method.scheme(),
            tol: self.tol,
            max_iter: self.max_iter,
            inner_iter: self.inner_iter,
            stagnation_window: self.stagnation_window,
            jacobian: self.jacobian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.iteration_config().validate()?;
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be at least 1"));
        }
        if !(self.t_end > 0.0) {
            return Err(invalid(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        step_count(0.0, self.t_end, self.h)?;
        if self.method != Method::DirknF && (self.r < 2 || self.r > self.k) {
            return Err(invalid(format!(
                "need 2 <= r <= k, got k={} r={}",
                self.k, self.r
            )));
        }
        if self.method == Method::DirknF && self.tableau.is_none() {
            return Err(invalid("dirkn-f needs a tableau file"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantError {
    pub name: String,
    /// `log₁₀ |I(q_N, q_N') − I(q₀, q₀')|`.
    pub log10_endpoint: f64,
    /// `log₁₀ max_n |I(q_n, q_n') − I(q₀, q₀')|`.
    pub log10_max_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    NonConvergence { step: usize, stage: Option<usize> },
    Failed { message: String },
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunStatus::Ok => f.write_str("ok"),
            RunStatus::NonConvergence { step, stage: None } => {
                write!(f, "no convergence at step {step}")
            }
            RunStatus::NonConvergence {
                step,
                stage: Some(s),
            } => write!(f, "no convergence at step {step} stage {s}"),
            RunStatus::Failed { message } => write!(f, "failed: {message}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub plan: ExperimentPlan,
    pub status: RunStatus,
    pub wall_time_s: f64,
    pub total_outer_iterations: usize,
    pub total_inner_iterations: usize,
    pub total_force_sweeps: usize,
    pub roundoff_limited_steps: usize,
    pub log10_solution_error: Option<f64>,
    pub invariant_errors: Vec<InvariantError>,
    pub metadata: BTreeMap<String, String>,
}

impl RunReport {
    pub fn invariant(&self, name: &str) -> Option<&InvariantError> {
        self.invariant_errors.iter().find(|e| e.name == name)
    }

    fn failed(plan: &ExperimentPlan, status: RunStatus) -> Self {
        Self {
            plan: plan.clone(),
            status,
            wall_time_s: 0.0,
            total_outer_iterations: 0,
            total_inner_iterations: 0,
            total_force_sweeps: 0,
            roundoff_limited_steps: 0,
            log10_solution_error: None,
            invariant_errors: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }
}

fn status_of(err: Error) -> std::result::Result<RunStatus, Error> {
    match err {
        Error::NonConvergence { step, stage, .. } => Ok(RunStatus::NonConvergence { step, stage }),
        e @ (Error::Force(_) | Error::Singular { .. }) => Ok(RunStatus::Failed {
            message: e.to_string(),
        }),
        e => Err(e),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn metadata(plan: &ExperimentPlan, has_exact: bool) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let solution = if has_exact {
        "log10 of the Euclidean norm of the position error at t_end against the exact solution"
            .to_string()
    } else {
        format!(
            "log10 of the Euclidean norm of the position difference at t_end against a reference \
             run of rkn-tfc-b (k={}, r={}) with step h/{REFERENCE_REFINEMENT}",
            plan.k, plan.r
        )
    };
    m.insert("solution_error".into(), solution);
    m.insert(
        "invariant_error".into(),
        "log10 |I(q_N, q_N') - I(q_0, q_0')| at t_end; log10_max_drift is the maximum over all grid points".into(),
    );
    let iterations = match plan.method {
        Method::DirknF => "fixed-point sweeps summed over all stages and steps",
        _ => {
            "outer sweeps summed over all steps, one k-stage force evaluation each, initial guess \
             excluded; inner corrections counted separately"
        }
    };
    m.insert("iteration_count".into(), iterations.into());
    let guess = match plan.method {
        Method::DirknF => "stage i starts from q + c_i h q' + h^2 sum_{j<i} a_bar_ij f(Q_j)",
        _ => "gamma^0 = (P^T Omega x I) f(u x q0 + h c x q0')",
    };
    m.insert("initial_guess".into(), guess.into());
    let stagnation = match plan.stagnation_window {
        Some(w) => format!("stop after {w} sweeps without a smaller correction"),
        None => "none".to_string(),
    };
    m.insert(
        "stopping_rule".into(),
        format!(
            "max-norm of the residual or of the correction <= {:e}, at most {} sweeps per step \
             (corrections at the rounding floor are accepted); stagnation exit: {stagnation}",
            plan.tol, plan.max_iter
        ),
    );
    m.insert(
        "jacobian".into(),
        match plan.jacobian {
            JacobianMode::Analytic => "analytic, evaluated at the start of each step",
            JacobianMode::FiniteDifference => {
                "central differences, evaluated at the start of each step"
            }
        }
        .into(),
    );
    m.insert(
        "timing".into(),
        format!(
            "median wall time of {} repetitions of the integration loop; coefficient generation and \
             reference runs excluded",
            plan.repetitions
        ),
    );
    m
}

/// Runs one plan against the built-in problems.
///
/// Invalid configurations are errors; iteration or force failures during the
/// integration are reported through `RunReport::status`.
pub fn run(plan: &ExperimentPlan) -> Result<RunReport> {
    run_in(plan, &Registry::default())
}

pub fn run_in(plan: &ExperimentPlan, registry: &Registry) -> Result<RunReport> {
    plan.validate()?;
    let spec = registry
        .get(&plan.problem)?
        .with_interval(0.0, plan.t_end)?;
    let config = plan.iteration_config();

    let coeffs;
    let tableau;
    let stepper: Box<dyn Stepper + '_> = match plan.method {
        Method::DirknF => {
            let path = plan.tableau.as_ref().expect("checked by validate");
            tableau = DirknTableau::load(path)?;
            Box::new(DirknStepper {
                tableau: &tableau,
                config: config.clone(),
            })
        }
        _ => {
            coeffs = MethodCoefficients::gauss(plan.k, plan.r)?;
            Box::new(CollocationStepper {
                coeffs: &coeffs,
                config: config.clone(),
            })
        }
    };

    let mut times = Vec::with_capacity(plan.repetitions);
    let mut first: Option<Trajectory> = None;
    for _ in 0..plan.repetitions {
        let start = Instant::now();
        let result = integrate_with(&spec.ivp, plan.h, &*stepper, Recording::EndpointOnly);
        times.push(start.elapsed().as_secs_f64());
        match result {
            Ok(tr) => {
                if first.is_none() {
                    first = Some(tr);
                }
            }
            Err(e) => {
                let mut report = RunReport::failed(plan, status_of(e)?);
                report.wall_time_s = times[0];
                report.metadata = metadata(plan, spec.ivp.exact.is_some());
                return Ok(report);
            }
        }
    }
    let tr = first.expect("at least one repetition");

    let mut meta = metadata(plan, spec.ivp.exact.is_some());
    let solution_error = match tr.endpoint_error {
        Some(e) => Some(e),
        None => match reference_endpoint(&spec.ivp, plan) {
            Ok(reference) => {
                let q = &tr.final_state().q;
                Some(
                    q.iter()
                        .zip(&reference)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt(),
                )
            }
            Err(e) => {
                meta.insert("reference_failure".into(), e.to_string());
                None
            }
        },
    };

    Ok(RunReport {
        plan: plan.clone(),
        status: RunStatus::Ok,
        wall_time_s: median(times),
        total_outer_iterations: tr.totals.outer_iterations,
        total_inner_iterations: tr.totals.inner_iterations,
        total_force_sweeps: tr.totals.force_sweeps,
        roundoff_limited_steps: tr.totals.roundoff_limited_steps,
        log10_solution_error: solution_error.map(f64::log10),
        invariant_errors: tr
            .invariant_drift
            .iter()
            .map(|d| InvariantError {
                name: d.name.clone(),
                log10_endpoint: d.endpoint_deviation.log10(),
                log10_max_drift: d.max_drift.log10(),
            })
            .collect(),
        metadata: meta,
    })
}

/// Final positions of the blended collocation run with step `h / 64`.
fn reference_endpoint(
    ivp: &crate::solver::SecondOrderIvp,
    plan: &ExperimentPlan,
) -> Result<Vec<f64>> {
    let coeffs = MethodCoefficients::gauss(plan.k.max(plan.r), plan.r)?;
    let stepper = CollocationStepper {
        coeffs: &coeffs,
        config: IterationConfig {
            scheme: IterationScheme::BlendedSingleInner,
            ..plan.iteration_config()
        },
    };
    let h_ref = plan.h / REFERENCE_REFINEMENT as f64;
    let tr = integrate_with(ivp, h_ref, &stepper, Recording::EndpointOnly)?;
    Ok(tr.final_state().q.clone())
}

/// Runs every plan in parallel. Invalid plans become failed rows.
pub fn run_table(plans: &[ExperimentPlan]) -> Vec<RunReport> {
    plans
        .par_iter()
        .map(|plan| {
            run(plan).unwrap_or_else(|e| {
                RunReport::failed(
                    plan,
                    RunStatus::Failed {
                        message: e.to_string(),
                    },
                )
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PaperGrid {
    /// Perturbed Kepler, `t ∈ {50, 100}`, `h ∈ {0.4, 0.2, 0.1}`.
    Table4,
    /// Hénon–Heiles, `t ∈ {50, 100}`, `h ∈ {0.1, 0.05, 0.025}`.
    Table5,
}

impl FromStr for PaperGrid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table4" => Ok(PaperGrid::Table4),
            "table5" => Ok(PaperGrid::Table5),
            _ => Err(invalid(format!(
                "unknown grid '{s}', expected table4 or table5"
            ))),
        }
    }
}

impl PaperGrid {
    pub fn problem(self) -> &'static str {
        match self {
            PaperGrid::Table4 => KEPLER,
            PaperGrid::Table5 => HENON_HEILES,
        }
    }

    pub fn cells(self) -> Vec<(f64, f64)> {
        let hs: [f64; 3] = match self {
            PaperGrid::Table4 => [0.4, 0.2, 0.1],
            PaperGrid::Table5 => [0.1, 0.05, 0.025],
        };
        [50.0, 100.0]
            .into_iter()
            .flat_map(|t| hs.into_iter().map(move |h| (t, h)))
            .collect()
    }

    /// One plan per (method, t, h): blended, fixed-point and DIRKN for each cell.
    pub fn plans(self, tableau: Option<PathBuf>) -> Vec<ExperimentPlan> {
        let mut out = Vec::new();
        for (t, h) in self.cells() {
            for method in [Method::RknTfcB, Method::RknTfcF, Method::DirknF] {
                let mut plan = ExperimentPlan::new(self.problem(), method, t, h);
                if method == Method::DirknF {
                    plan.tableau = tableau.clone();
                }
                out.push(plan);
            }
        }
        out
    }
}

/// One table line; errors are `log₁₀` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub problem: String,
    pub method: String,
    pub t_end: f64,
    pub h: f64,
    pub status: String,
    pub cpu_time_s: Option<f64>,
    pub iterations: Option<u64>,
    pub inner_iterations: Option<u64>,
    pub solution_error: Option<f64>,
    pub hamiltonian_error: Option<f64>,
    pub angular_momentum_error: Option<f64>,
    pub hamiltonian_max_drift: Option<f64>,
    pub angular_momentum_max_drift: Option<f64>,
}

impl From<&RunReport> for TableRow {
    fn from(r: &RunReport) -> Self {
        let ok = r.status.is_ok();
        let pick = |v: Option<f64>| if ok { v } else { None };
        Self {
            problem: r.plan.problem.clone(),
            method: r.plan.method.label().to_string(),
            t_end: r.plan.t_end,
            h: r.plan.h,
            status: r.status.to_string(),
            cpu_time_s: pick(Some(r.wall_time_s)),
            iterations: ok.then_some(r.total_outer_iterations as u64),
            inner_iterations: ok.then_some(r.total_inner_iterations as u64),
            solution_error: pick(r.log10_solution_error),
            hamiltonian_error: pick(r.invariant(HAMILTONIAN).map(|e| e.log10_endpoint)),
            angular_momentum_error: pick(r.invariant(ANGULAR_MOMENTUM).map(|e| e.log10_endpoint)),
            hamiltonian_max_drift: pick(r.invariant(HAMILTONIAN).map(|e| e.log10_max_drift)),
            angular_momentum_max_drift: pick(
                r.invariant(ANGULAR_MOMENTUM).map(|e| e.log10_max_drift),
            ),
        }
    }
}

pub fn rows(reports: &[RunReport]) -> Vec<TableRow> {
    reports.iter().map(TableRow::from).collect()
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

pub fn emit_markdown(rows: &[TableRow]) -> String {
    let mut out = String::new();
    out.push_str(
        "| Problem | Method (t,h) | CPU time (s) | Iterations | Solution error | Hamiltonian error | Angular momentum error | Status |\n",
    );
    out.push_str("|---|---|---:|---:|---:|---:|---:|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} ({}, {}) | {} | {} | {} | {} | {} | {} |",
            r.problem,
            r.method,
            r.t_end,
            r.h,
            cell(r.cpu_time_s, 3),
            r.iterations
                .map_or_else(|| "-".to_string(), |n| n.to_string()),
            cell(r.solution_error, 3),
            cell(r.hamiltonian_error, 3),
            cell(r.angular_momentum_error, 3),
            r.status
        );
    }
    out
}

pub fn emit_csv(rows: &[TableRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

const CSV_HEADER: [&str; 13] = [
    "problem",
    "method",
    "t_end",
    "h",
    "status",
    "cpu_time_s",
    "iterations",
    "inner_iterations",
    "solution_error",
    "hamiltonian_error",
    "angular_momentum_error",
    "hamiltonian_max_drift",
    "angular_momentum_max_drift",
];

pub fn parse_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected CSV header".into(),
        });
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn emit_json(reports: &[RunReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}
