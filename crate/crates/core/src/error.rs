use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("matrix still singular after ridge {ridge:e} (degenerate moment covariance?)")]
    SingularAfterJitter { ridge: f64 },

    #[error("unbalanced panel: {0}")]
    Unbalanced(String),

    #[error("invalid binary response: value {0} is not 0 or 1")]
    NonBinaryResponse(f64),

    #[error("covariate `{0}` is not present in the dataset")]
    MissingCovariate(String),

    #[error("logit link requires a binary response")]
    LinkFamilyMismatch,

    #[error("fitted probabilities are saturated (moment vectors vanish)")]
    SaturatedFit,

    #[error("tilting objective is unbounded below (origin outside the convex hull of the moment vectors)")]
    HullFailure,

    #[error("tilting did not converge")]
    TiltNotConverged,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("every candidate failed: {0}")]
    AllCandidatesFailed(String),

    #[error("objective or gradient not finite at the starting point")]
    NonFiniteStart,
}

pub type Result<T> = std::result::Result<T, Error>;
