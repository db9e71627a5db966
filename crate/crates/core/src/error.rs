use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/layer shape disagreement. The message names the offending dimension.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid argument or precondition violation.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Autodiff misuse: non-scalar backward root, consumed tape, cross-tape ops.
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// File I/O, with the path attached.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed pixel-data file (PPM/PGM) or checkpoint; offset is in bytes.
    #[error("decode error at byte {offset}: {msg}")]
    Decode { offset: usize, msg: String },

    /// Checkpoint content problem (bad magic, version, missing/mismatched tensor).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Run-configuration problems, reported all at once.
    #[error("config validation failed:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    /// Non-finite value where a finite one is required (loss, metric).
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
