use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
