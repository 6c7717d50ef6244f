//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data (bad CSV, unknown region,
    /// county totals exceeding state totals, and the like).
    #[error("data validation: {0}")]
    Data(String),

    /// Structural problem with the adjacency graph.
    #[error("graph: {0}")]
    Graph(String),

    /// A matrix that must be symmetric positive definite is not, or
    /// dimensions do not line up.
    #[error("precision matrix: {0}")]
    Precision(String),

    /// Invalid parameter value (out of documented range).
    #[error("parameter: {0}")]
    Parameter(String),

    /// Failure inside the sampler or forecaster at run time.
    #[error("runtime: {0}")]
    Runtime(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: data problems are distinguished from
    /// runtime failures so scripts can tell bad inputs from engine faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Graph(_) | Error::Csv(_) => 2,
            Error::Config(_) => 1,
            _ => 3,
        }
    }
}
