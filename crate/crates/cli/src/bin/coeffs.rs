use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rknfc::MethodCoefficients;
use rknfc_cli::{exit_code_for, fail, parse_or_exit, write_output, EXIT_INVALID};

/// Collocation coefficient generator.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the coefficient matrices for k Gauss-Legendre nodes and r basis functions.
    Dump {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        r: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match parse_or_exit::<Cli>() {
        Ok(c) => c,
        Err(code) => return code,
    };
    match cli.command {
        Command::Dump { k, r, out } => {
            let coeffs = match MethodCoefficients::gauss(k, r) {
                Ok(c) => c,
                Err(e) => return fail(exit_code_for(&e), e),
            };
            match write_output(out.as_deref(), &coeffs.to_text()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(EXIT_INVALID, format!("{e:#}")),
            }
        }
    }
}
