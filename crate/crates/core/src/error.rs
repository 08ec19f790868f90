use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty series")]
    EmptySeries,

    #[error("series of length {len} exceeds window capacity {capacity}")]
    Overlong { len: usize, capacity: usize },

    #[error("context has no examples")]
    EmptyContext,

    #[error("capacity exceeded: {what} is {got}, maximum is {max}")]
    Capacity {
        what: &'static str,
        got: usize,
        max: usize,
    },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("non-finite loss {loss} at step {step} (context {context})")]
    NonFinite {
        step: u64,
        context: usize,
        loss: f64,
    },

    #[error("dataset `{0}` has no usable windows")]
    NoWindows(String),

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input or configuration, as opposed to
    /// a failure during computation or I/O.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Parse { .. }
                | Error::DuplicateId(_)
                | Error::Capacity { .. }
                | Error::EmptySeries
                | Error::EmptyContext
                | Error::Overlong { .. }
                | Error::Contract(_)
                | Error::TensorShape { .. }
                | Error::MissingTensor(_)
                | Error::NoWindows(_)
        )
    }
}
