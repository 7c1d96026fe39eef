//! Error type shared across the pipeline.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can produce, grouped by how the caller should
/// react: bad configuration, a missing upstream artifact, or a runtime fault.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The requested operation cannot run with the given configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An input this stage depends on does not exist yet (wrong invocation
    /// order, typoed path, or a prior stage that was skipped).
    #[error("missing input: {0}")]
    MissingInput(String),

    /// Filesystem failure with the offending path attached.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An image file could not be decoded or encoded.
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },

    /// A checkpoint archive is malformed or belongs to a different model.
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    /// JSON or TOML (de)serialization failed.
    #[error("serialization error: {0}")]
    Serde(String),

    /// Any other runtime fault (shape mismatch, exhausted corpus, ...).
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 missing input, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingInput(_) => 3,
            _ => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
