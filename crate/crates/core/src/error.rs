use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("group {group} has no samples{context}")]
    EmptyGroup { group: usize, context: &'static str },

    #[error("hydraulic solver did not converge after {iterations} iterations (worst mass residual {worst_residual:.3e} m^3/s at node {node})")]
    SolverDiverged {
        iterations: usize,
        worst_residual: f64,
        node: u32,
    },

    #[error("scenario {scenario}: step {step}: {source}")]
    Scenario {
        scenario: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("negative pressure head {head:.3} m at junction {node}")]
    NegativePressure { node: u32, head: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("infeasible start: {0}")]
    Infeasible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
