use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
