use std::path::PathBuf;

use crate::imaging::Modality;

#[derive(Debug, thiserror::Error)]
pub enum AgmError {
    #[error("modality mismatch: expected {expected}, got {actual}")]
    ModalityMismatch { expected: Modality, actual: Modality },

    #[error("degenerate size: {0}")]
    DegenerateSize(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{branch} branch expects {expected_h}x{expected_w} input, got {actual_h}x{actual_w}")]
    Resolution {
        branch: String,
        expected_h: usize,
        expected_w: usize,
        actual_h: usize,
        actual_w: usize,
    },

    #[error("label mismatch: {0}")]
    LabelMismatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in loss term {term}")]
    NonFinite { term: String },
}

impl AgmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AgmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            AgmError::Config(_) => 2,
            AgmError::NonFinite { .. } => 4,
            AgmError::Data(_)
            | AgmError::MissingFile(_)
            | AgmError::Io { .. }
            | AgmError::Codec { .. }
            | AgmError::Checkpoint(_)
            | AgmError::LabelMismatch(_)
            | AgmError::ModalityMismatch { .. }
            | AgmError::Resolution { .. }
            | AgmError::InvalidImage(_)
            | AgmError::DegenerateSize(_)
            | AgmError::ShapeMismatch(_)
            | AgmError::Precondition(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, AgmError>;
