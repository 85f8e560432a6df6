//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition (non-positive rate,
    /// negative distance, empty device list, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested allocation cannot be realized (zero slot, global batch
    /// outside the feasible range, ...).
    #[error("infeasible allocation: {0}")]
    Infeasible(String),

    /// A numerical search failed to converge or a bracket did not behave as
    /// the theory requires. `details` carries the offending values.
    #[error("numerical failure in {context}: {details}")]
    Numerical { context: String, details: String },

    /// A profile fit was attempted on data that cannot pin down all
    /// parameters (e.g. samples on only one side of the knee).
    #[error("underdetermined fit: {0}")]
    UnderdeterminedFit(String),

    /// The requested exhaustive grid is larger than the configured cap.
    #[error("grid of {points} points exceeds cap of {cap}")]
    GridCapExceeded { points: u128, cap: u128 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }

    pub(crate) fn numerical(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            details: details.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
