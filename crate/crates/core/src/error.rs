use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition (shape, range, orthonormality).
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration is inconsistent or cannot be satisfied by the data.
    #[error("configuration error: {0}")]
    Config(String),

    /// An object was used before it reached the required state.
    #[error("state error: {0}")]
    State(String),

    /// A prerequisite artifact (checkpoint, manifest) does not exist.
    #[error("missing dependency: {0}")]
    MissingDependency(String),

    /// A manifest or transforms file could not be turned into records.
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// The view synthesizer failed or broke the exchange protocol.
    #[error("renderer error: {0}")]
    Render(String),

    /// The external synthesizer did not deliver every requested view in time.
    #[error("renderer timed out after {seconds:.1}s; missing pose indices {missing:?}")]
    RenderTimeout { seconds: f64, missing: Vec<usize> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
