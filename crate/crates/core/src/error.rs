use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("point {point:?} lies outside the {space} domain")]
    OutsideDomain { space: &'static str, point: Vec<f64> },
    #[error("rejection sampler exceeded {cap} proposals")]
    ProposalCapExceeded { cap: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("projected norm {norm:e} is below the floor {floor:e}")]
    DegenerateNorm { norm: f64, floor: f64 },
    #[error("popularity entry {index} must be positive and finite, got {value}")]
    NonPositivePopularity { index: usize, value: f64 },
    #[error("zero density at a sample that receives positive weight (distribution {index})")]
    ZeroDensity { index: usize },
    #[error("minibatch must contain at least two indices, got {0}")]
    BatchTooSmall(usize),
    #[error("model has no trainable parameters")]
    NoParameters,
    #[error("prototype list is empty")]
    EmptyPrototypes,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
