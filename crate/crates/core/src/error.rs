use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes that cannot be combined.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid block spec: {0}")]
    InvalidSpec(String),

    #[error("unsupported backbone scale '{0}' (available: B0, B1, B2, B3, B4, B5, B7)")]
    UnsupportedScale(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("weight names do not match the graph: missing {missing:?}, unexpected {unexpected:?}")]
    WeightNames {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step} (loss {loss}); last good checkpoint: {last_good:?}")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Option<PathBuf>,
    },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
