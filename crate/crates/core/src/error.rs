use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): {reason}")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        reason: &'static str,
    },

    #[error("parse error in record {index} (image `{image_id}`): field `{field}`: {reason}")]
    Parse {
        index: usize,
        image_id: String,
        field: String,
        reason: String,
    },

    #[error("label space registry: {0}")]
    Registry(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("missing input for stage `{stage}`: {path}")]
    MissingInput { stage: String, path: PathBuf },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{what} did not converge: {detail}; last losses {tail:?}")]
    NonConvergence {
        what: String,
        detail: String,
        tail: Vec<f64>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
