use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("checkpoint {path}: line {line}: field `{field}`: {message}")]
    CheckpointParse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("checkpoint {path}: unsupported version {found} (expected {expected})")]
    CheckpointVersion {
        path: PathBuf,
        found: String,
        expected: u32,
    },

    #[error("idx {path}: {message}")]
    IdxFormat { path: PathBuf, message: String },

    #[error("idx files disagree: {images} images but {labels} labels")]
    IdxCount { images: usize, labels: usize },

    #[error("idx {path}: payload truncated, expected {expected} bytes, found {found}")]
    IdxLength {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
