//! Error types shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TexanomError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training error: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, TexanomError>;

impl TexanomError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        TexanomError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for usage/config problems, 3 for
    /// runtime/numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            TexanomError::Config(_)
            | TexanomError::Format(_)
            | TexanomError::Contract(_)
            | TexanomError::Io { .. } => 2,
            _ => 3,
        }
    }
}
