use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("backward requires a scalar output, node {node} has shape {rows}x{cols}")]
    NonScalarOutput { node: usize, rows: usize, cols: usize },
    #[error("tape has not been evaluated")]
    NotEvaluated,
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("not a probability vector: {0}")]
    NotProbability(String),
    #[error("teacher variant `{0}` has no differentiable form")]
    NotDifferentiable(&'static str),
    #[error("reconstruction error {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    Reconstruction { residual: f64, tolerance: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
