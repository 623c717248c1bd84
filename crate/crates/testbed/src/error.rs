use std::io;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad scenario or config text. The CLI exits with 2.
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] nusa_core::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type HarnessResult<T> = Result<T, HarnessError>;
