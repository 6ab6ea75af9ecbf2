//! Error type shared by all modules.

use thiserror::Error;

/// Failure modes of the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A linear solve or other numeric kernel failed; `residual` carries the
    /// offending magnitude (pivot size or residual norm).
    #[error("numeric failure: {what} (residual {residual:.3e})")]
    Numeric { what: String, residual: f64 },

    /// The protocol cannot complete (e.g. zero merge success probability or
    /// a non-convergent renewal series).
    #[error("degenerate protocol: {0}")]
    DegenerateProtocol(String),

    /// A logical encoding has zero weight on the supplied state.
    #[error("degenerate encoding: {0}")]
    DegenerateEncoding(String),

    /// A simulated trajectory exceeded its configured time guard.
    #[error("simulation timeout: {0}")]
    Timeout(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
