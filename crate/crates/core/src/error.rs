use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Decoding failures for the on-disk formats (RVOL volumes and RNET checkpoints).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },
    #[error("truncated payload while reading {field}")]
    Truncated { field: &'static str },
    #[error("dim overflow: {field} = {value}")]
    DimOverflow { field: &'static str, value: u64 },
    #[error("zero extent in dim {field}")]
    ZeroDim { field: &'static str },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("unsupported ndim {found} (expected {expected})")]
    BadNdim { found: u8, expected: u8 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("shape mismatch {name}")]
    ShapeMismatch { name: String },
    #[error("unexpected parameter {name}")]
    UnexpectedParameter { name: String },
    #[error("missing parameter {name}")]
    MissingParameter { name: String },
    #[error("invalid utf-8 in {field}")]
    Utf8 { field: &'static str },
    #[error("corrupt metadata: {0}")]
    Metadata(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
