use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("IDX: bad magic number 0x{found:08x} (expected 0x{expected:08x})")]
    IdxMagic { expected: u32, found: u32 },

    #[error("IDX: truncated payload, expected {expected} bytes but found {actual}")]
    IdxTruncated { expected: usize, actual: usize },

    #[error("IDX: {0}")]
    IdxDimensions(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {cause}", path.display())]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("image encoding for {}: {detail}", path.display())]
    Image { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }
}
