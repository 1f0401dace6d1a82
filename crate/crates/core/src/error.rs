use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SciError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SciError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{0} of an empty tensor")]
    EmptyReduction(&'static str),

    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss([usize; 4]),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("checkpoint has bad magic (expected \"SCIW\")")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint is truncated: {0}")]
    Truncated(String),

    #[error("checkpoint architecture is inconsistent: {0}")]
    ArchMismatch(String),

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("unsupported image format in {path}: {format}")]
    UnsupportedFormat { path: PathBuf, format: String },

    #[error("no images found in {0}")]
    EmptyCorpus(PathBuf),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SciError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SciError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
