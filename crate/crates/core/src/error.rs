use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing transcript for prompt {0}")]
    MissingTranscript(String),

    #[error("transcript mismatch for prompt {prompt_id}: source {source_text:?} vs reference {reference_text:?}")]
    TranscriptMismatch {
        prompt_id: String,
        source_text: String,
        reference_text: String,
    },

    #[error("unknown vocoder backend {requested:?}; registered: {available:?}")]
    UnknownVocoder {
        requested: String,
        available: Vec<String>,
    },

    #[error("unknown extractor {requested:?}; registered: {available:?}")]
    UnknownExtractor {
        requested: String,
        available: Vec<String>,
    },

    #[error("extractor mismatch: model expects {expected:?}, latents come from {found:?}")]
    ExtractorMismatch { expected: String, found: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("external command failed: {0}")]
    External(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Wraps an error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
