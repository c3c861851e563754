use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown pinyin token `{token}` at character {position}")]
    UnknownToken { token: String, position: usize },

    #[error("phoneme `{0}` is not mapped by the cueing table")]
    UnmappedPhoneme(String),

    #[error("invalid mapping table: {0}")]
    InvalidTable(String),

    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("empty set")]
    EmptySet,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid temperature {0}: must be > 0")]
    InvalidTemperature(f64),

    #[error("divergence detected ({0})")]
    DivergenceDetected(String),

    #[error("diffusion step {step} out of range 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("non-finite latent state at reverse step {step}")]
    NonFiniteState { step: usize },

    #[error("audio backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sequence too short: {len} frames, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("segment count mismatch: {gesture} gesture vs {audio} audio segments")]
    CountMismatch { gesture: usize, audio: usize },

    #[error("zero vector in cosine computation")]
    ZeroVector,

    #[error("too few items: {n}, need at least {min}")]
    TooFewItems { n: usize, min: usize },

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::ShapeMismatch(message.into())
    }
}

/// Attaches a pipeline stage name to errors.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
