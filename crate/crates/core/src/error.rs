//! Error type shared across the core modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed an argument outside the documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Internal state and inputs are dimensionally or structurally inconsistent.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A scalar/matrix function was evaluated outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Configured parameters violate a hard model assumption.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A linear solver broke down or exhausted its iteration budget.
    #[error("solver failure in {context}: {reason} (residual {residual:.3e} after {iterations} iterations)")]
    SolverFailure {
        context: String,
        reason: String,
        residual: f64,
        iterations: usize,
    },

    /// Newton or a fixed-point loop did not converge.
    #[error("nonconvergence in {context}: {reason}")]
    NonConvergence {
        context: String,
        reason: String,
        history: Vec<f64>,
    },
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
