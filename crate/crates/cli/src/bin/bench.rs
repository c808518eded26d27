use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rknfc::bench::{self, ExperimentPlan, Method, PaperGrid, RunReport, RunStatus};
use rknfc::JacobianMode;
use rknfc_cli::{
    exit_code_for, fail, parse_or_exit, write_output, EXIT_INVALID, EXIT_NON_CONVERGENCE,
};

/// Benchmark runner for the collocation integrators.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Jacobian {
    Analytic,
    Fd,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    RknTfcB,
    RknTfcF,
    RknTfcN,
    RknTfcOi,
    DirknF,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::RknTfcB => Method::RknTfcB,
            MethodArg::RknTfcF => Method::RknTfcF,
            MethodArg::RknTfcN => Method::RknTfcN,
            MethodArg::RknTfcOi => Method::RknTfcOi,
            MethodArg::DirknF => Method::DirknF,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Table4,
    Table5,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one problem with one method and report errors and iteration counts.
    Run {
        #[arg(long)]
        problem: String,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        tend: f64,
        #[arg(long)]
        h: f64,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long, default_value_t = 1e-16)]
        tol: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iter: usize,
        #[arg(long, default_value_t = 2)]
        inner: usize,
        /// Stop a step after this many sweeps without a smaller correction.
        #[arg(long)]
        stagnation: Option<usize>,
        #[arg(long, value_enum, default_value = "analytic")]
        jacobian: Jacobian,
        #[arg(long)]
        tableau: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate a full benchmark grid.
    Table {
        #[arg(long, value_enum)]
        paper_grid: GridArg,
        /// Tableau file for the DIRKN rows; without it those rows are marked failed.
        #[arg(long)]
        tableau: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn render(reports: &[RunReport], format: Format) -> Result<String, rknfc::Error> {
    match format {
        Format::Md => Ok(bench::emit_markdown(&bench::rows(reports))),
        Format::Csv => bench::emit_csv(&bench::rows(reports)),
        Format::Json => bench::emit_json(reports),
    }
}

fn emit(reports: &[RunReport], format: Format, out: Option<PathBuf>) -> Option<ExitCode> {
    let text = match render(reports, format) {
        Ok(t) => t,
        Err(e) => return Some(fail(exit_code_for(&e), e)),
    };
    write_output(out.as_deref(), &text)
        .err()
        .map(|e| fail(EXIT_INVALID, format!("{e:#}")))
}

fn main() -> ExitCode {
    let cli = match parse_or_exit::<Cli>() {
        Ok(c) => c,
        Err(code) => return code,
    };
    match cli.command {
        Command::Run {
            problem,
            method,
            tend,
            h,
            k,
            r,
            tol,
            max_iter,
            inner,
            stagnation,
            jacobian,
            tableau,
            repetitions,
            format,
            out,
        } => {
            let plan = ExperimentPlan {
                problem,
                method: method.into(),
                t_end: tend,
                h,
                k,
                r,
                tol,
                max_iter,
                inner_iter: inner,
                stagnation_window: stagnation,
                jacobian: match jacobian {
                    Jacobian::Analytic => JacobianMode::Analytic,
                    Jacobian::Fd => JacobianMode::FiniteDifference,
                },
                tableau,
                repetitions,
            };
            let report = match bench::run(&plan) {
                Ok(r) => r,
                Err(e) => return fail(exit_code_for(&e), e),
            };
            if let Some(code) = emit(std::slice::from_ref(&report), format, out) {
                return code;
            }
            match report.status {
                RunStatus::Ok => ExitCode::SUCCESS,
                status => fail(EXIT_NON_CONVERGENCE, status),
            }
        }
        Command::Table {
            paper_grid,
            tableau,
            repetitions,
            format,
            out,
        } => {
            let grid = match paper_grid {
                GridArg::Table4 => PaperGrid::Table4,
                GridArg::Table5 => PaperGrid::Table5,
            };
            let mut plans = grid.plans(tableau);
            for p in &mut plans {
                p.repetitions = repetitions;
            }
            if let Err(e) = plans
                .iter()
                .find(|p| p.method != Method::DirknF)
                .map_or(Ok(()), |p| p.validate())
            {
                return fail(exit_code_for(&e), e);
            }
            let reports = bench::run_table(&plans);
            emit(&reports, format, out).unwrap_or(ExitCode::SUCCESS)
        }
    }
}
