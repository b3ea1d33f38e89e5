use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),

    #[error("window overlap-add envelope vanishes at sample {index}: configuration violates COLA")]
    Cola { index: usize },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("pool cannot satisfy request: {0}")]
    PoolTooSmall(String),

    #[error("collinear references in bss_eval")]
    CollinearReferences,

    #[error("input too short for {what}: need {need}, got {got}")]
    TooShort {
        what: &'static str,
        need: usize,
        got: usize,
    },

    #[error("extractor `{net}` reached accuracy {achieved:.3} below floor {floor:.3} after {epochs} epochs")]
    AccuracyFloor {
        net: &'static str,
        achieved: f64,
        floor: f64,
        epochs: usize,
    },

    #[error("extractors must be frozen before use")]
    NotFrozen,

    #[error("non-finite activations in layer `{layer}`")]
    NonFiniteActivation { layer: String },

    #[error("non-finite loss at step {step}; last good checkpoint: {last_good:?}")]
    NumericalFailure {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
