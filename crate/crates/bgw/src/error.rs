//! Crate-wide error type.
//!
//! Errors are split along the lines callers care about: input validation
//! (`Invalid*`, `Unsupported`, refusals with context) versus numerical
//! failure during a run (`Overflow`, `Numerical`, `NoBracket`).

use thiserror::Error;

/// All failures produced by this crate.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Offspring probabilities fail validation (negative entry, bad sum, ...).
    #[error("invalid offspring distribution: {0}")]
    InvalidDistribution(String),

    /// Interaction table fails validation (boundary row nonzero, NaN, ...).
    #[error("invalid interaction: {0}")]
    InvalidInteraction(String),

    /// Model parameters are inconsistent (boundary out of range, K mismatch).
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// A tree fails its structural invariants.
    #[error("invalid tree: {0}")]
    InvalidTree(String),

    /// A spin configuration violates the presence/absence constraint.
    /// `site` is the breadth-first index of the first violating site.
    #[error("invalid spin configuration at site {site} (label \"{label}\"): {reason}")]
    InvalidSpin {
        site: usize,
        label: String,
        reason: String,
    },

    /// An enumeration was refused because it would visit too many objects.
    #[error("enumeration refused: depth {depth} with K={k} holds {count} objects (budget {budget})")]
    EnumerationBudget {
        depth: usize,
        k: u8,
        count: u128,
        budget: u128,
    },

    /// Linear-space iteration left the representable range.  `last_step` is
    /// the index of the last finite state, which the iterator still holds.
    #[error("iteration overflowed at step {}; last finite state is step {last_step}; switch to the log-space iteration for supercritical growth", last_step + 1)]
    Overflow { last_step: usize },

    /// An inequality suite was asked to run without its hypothesis.
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    /// Bisection could not bracket a sign change.
    #[error("no sign change in bracket [{lo}, {hi}]: {reason}")]
    NoBracket { lo: f64, hi: f64, reason: String },

    /// A least-squares fit was refused or is degenerate.
    #[error("fit rejected: {0}")]
    FitRejected(String),

    /// Generic numerical failure (non-convergence, misclassification, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Operation outside the supported domain (e.g. closed forms need K=2).
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    /// True for failures of input validation rather than of a computation.
    /// The CLI maps validation errors to exit code 1 and numerical failures
    /// to exit code 2.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Overflow { .. } | Error::Numerical(_) | Error::NoBracket { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
