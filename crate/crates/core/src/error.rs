use thiserror::Error;

use crate::mesh::TopologyError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("topology validation failed: {0}")]
    Topology(#[from] TopologyError),

    #[error("{0}")]
    Format(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("unregistered op(s): {}", .0.join(", "))]
    UnknownOp(Vec<String>),

    #[error("level {level}: {source}")]
    AtLevel { level: usize, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn at_level(self, level: usize) -> Self {
        Error::AtLevel {
            level,
            source: Box::new(self),
        }
    }

    /// True for errors caused by malformed inputs (files, configs, shapes)
    /// rather than by numerics going wrong.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::Diverged { .. } => false,
            Error::AtLevel { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}
