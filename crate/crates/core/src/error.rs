use std::io;

use thiserror::Error;

/// Errors produced across the simulation and estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data that cannot be processed (format, alignment, length).
    #[error("data error: {0}")]
    Data(String),
    /// Requested operating point lies outside the supported regimes.
    #[error("regime unsupported: {0}")]
    RegimeUnsupported(String),
    /// An estimator denominator is zero or statistically indistinguishable from zero.
    #[error("degenerate denominator: {0}")]
    DegenerateDenominator(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
