//! Error type shared across the library.
//!
//! The CLI maps these to process exit codes: configuration problems exit
//! with 2, numeric failures (non-finite values, failed convergence) with 3,
//! everything else with 1.

use thiserror::Error;

/// Unified error type for every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched or invalid array dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// A documented capacity guard was exceeded (plan space, policy space, buffers).
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// An iterative procedure failed to reach its tolerance.
    #[error("failed to converge: {msg} (residual {residual:.3e})")]
    Convergence { msg: String, residual: f64 },

    /// A NaN or infinity showed up where a finite value is required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An operation was called in a state that does not permit it.
    #[error("state error: {0}")]
    State(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Degenerate input with no defined result (e.g. zero-norm vectors).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Invalid configuration, unparsable config file, or bad CLI input.
    #[error("config error: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) | Error::Convergence { .. } => 3,
            _ => 1,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
