use thiserror::Error;

/// Errors raised by the identification pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SysIdError {
    #[error("FIR order must be at least 1")]
    ZeroOrder,

    #[error("hyperparameters outside the feasible box: lambda={lambda}, beta={beta}")]
    InfeasibleHyperparameters { lambda: f64, beta: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("input and output lengths differ ({u} vs {y})")]
    LengthMismatch { u: usize, y: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("normal matrix is rank deficient")]
    RankDeficient,

    #[error("not enough samples: have {nbar}, need more than {n}")]
    InsufficientSamples { nbar: usize, n: usize },

    #[error("ill-conditioned rank-one update (denominator {denominator:e})")]
    IllConditionedUpdate { denominator: f64 },

    #[error("noise variance must be positive and finite, got {0}")]
    InvalidNoiseVariance(f64),

    #[error("non-finite value while evaluating {0}")]
    NonFinite(&'static str),

    #[error("no batch processed yet")]
    NoEstimate,

    #[error("true impulse response is zero")]
    ZeroTruth,

    #[error("could not generate a system satisfying the decay check after {0} attempts")]
    SystemGeneration(usize),
}

pub type Result<T> = std::result::Result<T, SysIdError>;
