use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate camera: elevation {0}° leaves the up vector undefined")]
    DegenerateUp(f64),

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical abort: non-finite gradient in parameter block `{block}` at step {step}")]
    NonFinite { block: String, step: usize },

    #[error("score provider is not trainable")]
    NotTrainable,

    #[error("empty mesh")]
    EmptyMesh,

    #[error("provider error: {0}")]
    Provider(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches a file path to an error raised while reading or writing it.
    pub fn at(self, path: impl Into<PathBuf>) -> Error {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// True when the error stems from non-finite numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::File { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
