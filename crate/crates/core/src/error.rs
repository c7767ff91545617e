use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("pixel ({0}, {1}) outside interpolation support")]
    OutOfSupport(f64, f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("rank-deficient input: {0}")]
    RankDeficient(String),
    #[error("empty validity mask")]
    EmptyMask,
    #[error("gradient undefined: {0}")]
    GradientUndefined(String),
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("all variables are fixed")]
    AllFixed,
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("no overlapping frames")]
    NoOverlap,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
