use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dimension {dim} is constant (zero standard deviation)")]
    ConstantDimension { dim: usize },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("covariance of component {component} is not positive definite")]
    SingularComponent { component: usize },

    #[error("marginal requested over an empty or invalid index set")]
    EmptyDims,

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("tape does not match the network it is replayed against")]
    TapeMismatch,

    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },

    #[error("no training data")]
    EmptyData,

    #[error("IDM acceleration requested with non-positive gap {gap}")]
    NonPositiveGap { gap: f64 },

    #[error("accept-reject sampler exceeded {limit} rejections")]
    MaxRejectionsExceeded { limit: usize },

    #[error("state flow produced no in-box sample after {attempts} attempts")]
    DegenerateFlow { attempts: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty outcome stream")]
    EmptyStream,

    #[error("non-finite likelihood ratio at scenario {index}")]
    NonFiniteWeight { index: usize },

    #[error("scenario has {steps} maneuvers but {terms} likelihood terms")]
    MissingTerms { steps: usize, terms: usize },

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("{bad} of {total} rows malformed (limit 1%)")]
    TooManyMalformed { bad: usize, total: usize },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("no car-following pairs found")]
    NoPairsFound,

    #[error("reports are not comparable: {0}")]
    IncompatibleTargets(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unsupported format version {0}")]
    FormatVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 invalid config, 3 data error,
    /// 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::InvalidConfig(_)
            | Error::IncompatibleTargets(_)
            | Error::InvalidMask(_)
            | Error::EmptyDims => 2,
            Error::FileNotFound(_)
            | Error::TooManyMalformed { .. }
            | Error::MissingColumn(_)
            | Error::NoPairsFound
            | Error::TooFewSamples { .. }
            | Error::EmptyData
            | Error::EmptyStream
            | Error::MissingTerms { .. }
            | Error::FormatVersion(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 3,
            _ => 4,
        }
    }
}
