use thiserror::Error;

use crate::archive::ArchiveError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingKey(String),

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    KeyShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unexpected parameter `{0}` not used by the model")]
    UnusedKey(String),

    #[error("weights were produced for a different configuration (archive {archive}, config {config})")]
    ConfigHash { archive: String, config: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("evaluation: {0}")]
    Eval(String),

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }
}
