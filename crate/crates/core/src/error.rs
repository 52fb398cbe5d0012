use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate features: total variance {0:e} is below threshold")]
    DegenerateFeatures(f64),

    #[error("degenerate component: value range {0:e} is below threshold")]
    DegenerateComponent(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("training diverged at step {step}: loss {loss}")]
    DivergedTraining { step: usize, loss: f64 },

    #[error("time {t} is below the floor {floor}; the score is singular there")]
    SingularTime { t: f64, floor: f64 },

    #[error("expected 3 channels, got {0}")]
    BadChannels(usize),

    #[error("unknown class: {0}")]
    UnknownClass(String),

    #[error("image size {size} is not divisible by patch size {patch}")]
    BadPatchSize { size: usize, patch: usize },

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("non-finite values in input")]
    NonFiniteValues,

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
