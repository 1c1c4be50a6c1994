//! Error type shared across the library.
//!
//! Variants map onto the process exit codes used by the command-line
//! harness: precondition/domain failures exit 2, solver non-convergence
//! exits 3, and partially completed experiments exit 4.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Error, Debug)]
pub enum Error {
    /// Kernel evaluated at its singularity (x = 0).
    #[error("singular kernel input: {0}")]
    Singular(String),

    /// Two particles coincide; pairwise energy is +∞.
    #[error("coincident particles {i} and {j}: pair energy is infinite")]
    CoincidentPair { i: usize, j: usize },

    /// A particle lies outside the grid box.
    #[error("particle {index} lies outside the grid box")]
    OutOfBox { index: usize },

    /// Operands live on different grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A caller-facing precondition failed (parameter regime, support,
    /// resolution, ...).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Invalid domain input (nonpositive radius, empty region, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Fixed-point or linear solver failed to reach tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        /// Tail of the residual history, most recent last.
        history: Vec<f64>,
    },

    /// The thermal density underflows where a particle sits; the one-body
    /// term would be infinite.
    #[error("thermal density underflows at node {node}; one-body term undefined there")]
    Underflow { node: usize },

    /// An experiment completed some cells but not all.
    #[error("partial results: {0}")]
    Partial(String),

    /// Configuration or result-file syntax error.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 precondition/domain, 3
    /// non-convergence, 4 partial results.
    #[must_use]
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } => 3,
            Error::Partial(_) => 4,
            _ => 2,
        }
    }
}
