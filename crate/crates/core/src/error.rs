use thiserror::Error;

use crate::iterate::IterationStats;

/// Failure reported by a user-supplied force or Jacobian function.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{message}")]
pub struct ForceError {
    pub message: String,
}

impl ForceError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} = {value} is outside {domain}")]
    OutOfDomain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("force evaluation failed: {0}")]
    Force(#[from] ForceError),

    #[error("singular {matrix} matrix{}", match .h { Some(h) => format!(" (h = {h})"), None => String::new() })]
    Singular {
        matrix: &'static str,
        h: Option<f64>,
    },

    #[error("iteration did not converge at step {step}{}: {} sweeps, last update norm {:e}",
        match .stage { Some(s) => format!(", stage {s}"), None => String::new() },
        .stats.outer_count, .stats.final_update_norm)]
    NonConvergence {
        step: usize,
        stage: Option<usize>,
        stats: IterationStats,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
