//! Shared plumbing for the `bench` and `coeffs` binaries.

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::Context;

pub const EXIT_OK: u8 = 0;
pub const EXIT_NON_CONVERGENCE: u8 = 2;
pub const EXIT_INVALID: u8 = 3;

/// Parses arguments, mapping usage errors to [`EXIT_INVALID`].
pub fn parse_or_exit<P: clap::Parser>() -> Result<P, ExitCode> {
    P::try_parse().map_err(|e| {
        let _ = e.print();
        if e.use_stderr() {
            ExitCode::from(EXIT_INVALID)
        } else {
            ExitCode::from(EXIT_OK)
        }
    })
}

/// Exit code for a library error.
pub fn exit_code_for(err: &rknfc::Error) -> u8 {
    use rknfc::Error::*;
    match err {
        InvalidArgument(_) | OutOfDomain { .. } | Parse { .. } | Io(_) | Csv(_) | Json(_) => {
            EXIT_INVALID
        }
        NonConvergence { .. } | Singular { .. } | Force(_) => EXIT_NON_CONVERGENCE,
    }
}

/// Writes `text` to `out`, or to stdout when `out` is `None`.
pub fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .context("writing to stdout")?;
            Ok(())
        }
    }
}

pub fn fail(code: u8, err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}
