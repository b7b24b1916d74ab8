use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: no convergence after {iterations} iterations (last iterate {last})")]
    Convergence {
        context: String,
        iterations: usize,
        last: f64,
        trace: Vec<f64>,
    },

    #[error("matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("formula error: {0}")]
    Formula(String),

    #[error("rank-deficient design; dependent columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("training history of subject {subject} is constant; scaled error undefined")]
    DegenerateScale { subject: String },

    #[error("AUROC undefined: outcomes contain a single class")]
    UndefinedAuroc,

    #[error("correlation structure inconsistent: PSD projection moved {relative:.4} of the matrix norm (limit {limit})")]
    Structural { relative: f64, limit: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("model {model} failed in {failed} of {total} replications: {diagnostics}")]
    TooManyFailures {
        model: String,
        failed: usize,
        total: usize,
        diagnostics: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 for configuration/input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Convergence { .. }
            | Error::NotPsd { .. }
            | Error::Domain(_)
            | Error::RankDeficient { .. }
            | Error::Estimation(_)
            | Error::DegenerateScale { .. }
            | Error::UndefinedAuroc
            | Error::Structural { .. }
            | Error::TooManyFailures { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
