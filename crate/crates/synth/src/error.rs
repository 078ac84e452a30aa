//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    /// Invalid parameter handed to a numerical routine.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Array shapes do not agree.
    #[error("shape error: {0}")]
    Shape(String),
    /// Run configuration is inconsistent or incomplete.
    #[error("config error: {0}")]
    Config(String),
    /// Input data is missing, malformed, or internally inconsistent.
    #[error("data error: {0}")]
    Data(String),
    /// A computation produced non-finite values or diverged.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

impl SynthError {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            SynthError::Parameter(_) | SynthError::Config(_) => 2,
            SynthError::Shape(_) | SynthError::Data(_) | SynthError::Io(_) => 3,
            SynthError::Numeric(_) => 4,
        }
    }
}
