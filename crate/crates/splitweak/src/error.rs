//! Error types shared across the library.

use thiserror::Error;

/// Library-wide error type.
///
/// The variants mirror the failure classes the CLI maps to exit codes:
/// configuration problems (exit 2), numerical overflow (exit 3) and
/// statistically unresolved convergence fits (exit 4).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (unknown model, bad scheme, missing oracle policy, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation (negative time, empty cloud, dimension mismatch).
    #[error("argument error: {0}")]
    Argument(String),

    /// The requested operation is not supported by this model/payoff combination.
    #[error("capability error: {0}")]
    Capability(String),

    /// A state became nonfinite; the context names the offending substep/step/path.
    #[error("numerical overflow: {0}")]
    Overflow(String),

    /// A convergence fit had fewer than three statistically resolved levels.
    #[error("inconclusive result: {0}")]
    Inconclusive(String),
}

impl Error {
    /// Exit status used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Capability(_) => 2,
            Error::Overflow(_) => 3,
            Error::Inconclusive(_) => 4,
        }
    }

    /// Wrap an overflow error with additional location context.
    pub fn with_context(self, context: &str) -> Self {
        match self {
            Error::Overflow(msg) => Error::Overflow(format!("{context}: {msg}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
