use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("index {index} out of range for {len} atoms")]
    Index { index: usize, len: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite input: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("kernel {kernel} is rank deficient")]
    Degenerate { kernel: usize },

    #[error("finite-difference oracle produced a non-finite value at coordinate {index}")]
    Oracle { index: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("generation gave up after {attempts} attempts")]
    Generation { attempts: usize },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

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

/// Failures specific to reading a model checkpoint.
#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint is truncated")]
    Truncated,

    #[error("checksum mismatch: payload is corrupt")]
    Checksum,

    #[error("malformed header: {0}")]
    Header(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("unexpected tensor `{found}` (expected `{expected}`)")]
    TensorName { found: String, expected: String },

    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
}
