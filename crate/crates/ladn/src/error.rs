use std::path::PathBuf;

/// Crate-wide error type. Variants carry enough context to name the
/// offending tensor, file, or config field in the message.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("non-finite value in loss term '{0}'")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error in {file}: {msg}")]
    Parse { file: PathBuf, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: validation/usage errors exit 2,
    /// everything else exits 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            _ => 1,
        }
    }
}
