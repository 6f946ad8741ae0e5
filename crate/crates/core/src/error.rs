use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoseError {
    #[error("point has non-positive depth in the camera frame")]
    NonPositiveDepth,
    #[error("ray has no usable ground-plane component")]
    DegenerateRay,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("no valid solution")]
    NoValidSolution,
    #[error("normal equations are singular")]
    SingularNormalEquations,
    #[error("insufficient inliers: need {needed}, got {got}")]
    InsufficientInliers { needed: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("estimate is the zero vector")]
    ZeroEstimate,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = PoseError> = std::result::Result<T, E>;
