use thiserror::Error;

pub type Result<T> = std::result::Result<T, SlmError>;

/// Crate-wide error type. The CLI maps variants onto process exit codes:
/// config/usage problems exit 1, numeric failures exit 2, I/O exits 3.
#[derive(Debug, Error)]
pub enum SlmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("numeric failure at step {step}: {detail}")]
    Numeric { step: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl SlmError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        SlmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            SlmError::Numeric { .. } => 2,
            SlmError::Io { .. } => 3,
            _ => 1,
        }
    }
}
