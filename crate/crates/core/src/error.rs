use thiserror::Error;

/// Errors raised by the estimators, trainers and serializers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Dimensions or hyperparameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A log whose propensities do not match its declared mode, or an
    /// estimator applied to a log of the wrong mode.
    #[error("log consistency error: {0}")]
    LogConsistency(String),

    /// Empty or otherwise unusable input.
    #[error("input error: {0}")]
    Input(String),

    /// The self-normalizer sum of importance weights is zero.
    #[error("degenerate support: sum of importance weights is zero")]
    DegenerateSupport,

    #[error("fitting error: {0}")]
    Fitting(String),

    #[error("serialization error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
