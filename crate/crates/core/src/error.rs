use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed input data or a dataset that does not fit its schema.
    #[error("data error: {0}")]
    Data(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    /// A caller-supplied parameter is out of range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Parameters are individually valid but cannot be satisfied together
    /// (e.g. more selections than queries).
    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("privacy budget exceeded: spending {requested} with {remaining} remaining")]
    BudgetExceeded { requested: f64, remaining: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::Infeasible(_) | Error::BudgetExceeded { .. } => 4,
            Error::Io { .. } | Error::Csv(_) | Error::Json(_) | Error::Data(_) | Error::SchemaMismatch(_) => 3,
        }
    }
}
