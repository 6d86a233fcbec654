use thiserror::Error;

use crate::tensor::{DType, Shape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: expected dtype {expected}, found {found}")]
    DTypeMismatch { op: &'static str, expected: DType, found: DType },
    #[error("{op}: dtype {dtype} is not supported")]
    UnsupportedDType { op: &'static str, dtype: DType },
    #[error("length {0} is not a power of two")]
    NonPowerOfTwo(usize),
    #[error("buffer holds {found} elements, shape requires {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("unknown dtype tag {0}")]
    UnknownDType(u8),
}

/// Errors raised by a stateful operation, as reported by a [`StateStore`].
///
/// [`StateStore`]: crate::exec::StateStore
#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("operation on `{0}` timed out")]
    Timeout(String),
    #[error("queue `{0}` is closed")]
    QueueClosed(String),
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("queue `{name}`: {reason}")]
    QueueSpec { name: String, reason: String },
    #[error("cannot reach owner {owner}: {message}")]
    Remote { owner: String, message: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("placeholder node {0} has no feed")]
    MissingFeed(u32),
    #[error("cycle detected at node {0}")]
    CycleDetected(u32),
    #[error("node {0} does not exist")]
    UnknownNode(u32),
    #[error("node {node}: {source}")]
    Kernel { node: u32, source: TensorError },
    #[error("node {node}: {source}")]
    State { node: u32, source: StateError },
    #[error("node {node}: bad attribute `{name}`: {reason}")]
    BadAttr { node: u32, name: String, reason: String },
    #[error("node {node} ({op}) cannot be placed on {device}")]
    UnsupportedPlacement { node: u32, op: &'static str, device: String },
    #[error("no devices available")]
    NoDevices,
    #[error("serialized graph is {size} bytes, limit is {limit}")]
    GraphTooLarge { size: usize, limit: usize },
    #[error("malformed graph encoding: {0}")]
    Decode(String),
    #[error("fetch list is empty")]
    EmptyFetch,
    #[error("bad device name `{0}`")]
    BadDevice(String),
}

impl GraphError {
    /// Node id carried by node-scoped errors.
    pub fn node(&self) -> Option<u32> {
        match self {
            GraphError::MissingFeed(n)
            | GraphError::CycleDetected(n)
            | GraphError::UnknownNode(n)
            | GraphError::Kernel { node: n, .. }
            | GraphError::State { node: n, .. }
            | GraphError::BadAttr { node: n, .. }
            | GraphError::UnsupportedPlacement { node: n, .. } => Some(*n),
            _ => None,
        }
    }
}
