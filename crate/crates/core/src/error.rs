//! Error type shared by every stage of the toolkit.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range configuration (grid, basis, options).
    #[error("configuration error: {0}")]
    Config(String),

    /// A configuration value failed validation; `field` names the offending key.
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    /// Parse failure of a configuration or data file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The requested mass cannot be carried by any density in the class.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// An input density does not belong to the admissible class.
    #[error("feasibility violation: {0}")]
    Feasibility(String),

    /// A documented precondition of an operation does not hold.
    #[error("precondition failed at stage `{stage}`: {message}")]
    Precondition { stage: String, message: String },

    /// Fields or trajectories that should share a grid do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Parameter outside the supported range (e.g. an exponent).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Input that makes the requested quantity undefined.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The brute-force oracle was asked for a problem it cannot enumerate.
    #[error("outside oracle scope: {0}")]
    OracleScope(String),

    /// An iterative solver stopped without meeting its tolerance.
    #[error("`{stage}` did not converge after {iterations} iterations: {message} (last residuals: {residuals:?})")]
    NonConvergence {
        stage: String,
        iterations: usize,
        message: String,
        residuals: Vec<f64>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn precondition(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Precondition {
            stage: stage.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Re-labels precondition and convergence failures with the pipeline stage
    /// they surfaced in.
    pub fn at_stage(self, stage: &str) -> Self {
        match self {
            Error::Precondition { message, .. } => Error::Precondition {
                stage: stage.to_string(),
                message,
            },
            Error::NonConvergence {
                stage: inner,
                iterations,
                message,
                residuals,
            } => Error::NonConvergence {
                stage: format!("{stage}/{inner}"),
                iterations,
                message,
                residuals,
            },
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation { .. }
            | Error::Parse { .. }
            | Error::Infeasible(_)
            | Error::Feasibility(_)
            | Error::Precondition { .. }
            | Error::ShapeMismatch(_)
            | Error::Unsupported(_)
            | Error::Degenerate(_)
            | Error::OracleScope(_) => 2,
            Error::NonConvergence { .. } => 3,
            Error::Io { .. } => 4,
        }
    }
}
