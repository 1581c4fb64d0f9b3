use std::path::PathBuf;

use pathmoe_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: entity `{name}` does not occur in the training graph")]
    UnknownEntity {
        path: PathBuf,
        line: usize,
        name: String,
    },
    #[error("inverse relations were already added to this graph")]
    AlreadyAugmented,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint shapes do not match the model: {}", .0.join(", "))]
    ShapeMismatch(Vec<String>),
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    Divergence {
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("cannot evaluate an empty query split")]
    EmptySplit,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
