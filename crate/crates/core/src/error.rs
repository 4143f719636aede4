use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("asymmetric adjacency: {from} lists {to} but {to} does not list {from}")]
    Asymmetry { from: usize, to: usize },

    #[error("self-loop at node {0}")]
    SelfLoop(usize),

    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("shape mismatch: expected dimension {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("privacy budget exceeded: executed {executed} updates, budgeted {budgeted}")]
    BudgetExceeded { executed: u64, budgeted: u64 },

    #[error("solver did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("cell {cell} failed: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::BudgetExceeded { .. } => 4,
            Error::Cell { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
