use thiserror::Error;

/// Errors raised by the numeric core.
///
/// Variants map onto the CLI exit-code families: configuration (2),
/// data (3), and numerical/degenerate (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("degenerate profile: {0}")]
    Degenerate(String),

    #[error("integration failed at step {step}: {msg}")]
    Integration { step: usize, msg: String },

    #[error("no data available: {0}")]
    Absent(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Shape { .. }
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::Absent(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::Degenerate(_) | Error::Integration { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
