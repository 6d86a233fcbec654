use std::io;

use flowhpc_core::{GraphError, StateError};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid cluster spec: {0}")]
    InvalidSpec(String),
    #[error("task {job}:{index} is not in the cluster spec")]
    IdentityNotInSpec { job: String, index: usize },
    #[error("address {0} is already in use")]
    AddressInUse(String),
    #[error("cannot connect to {addr}: {reason}")]
    ConnectionFailed { addr: String, reason: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote error: {0}")]
    Remote(WireError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl ClusterError {
    /// True for a local or remote `QueueClosed`.
    pub fn is_queue_closed(&self) -> bool {
        match self {
            ClusterError::State(StateError::QueueClosed(_)) => true,
            ClusterError::Remote(w) => matches!(w.to_state_error(), Some(StateError::QueueClosed(_))),
            _ => false,
        }
    }

    /// True for a local or remote `Timeout`.
    pub fn is_timeout(&self) -> bool {
        match self {
            ClusterError::State(StateError::Timeout(_)) => true,
            ClusterError::Remote(w) => matches!(w.to_state_error(), Some(StateError::Timeout(_))),
            ClusterError::Io(e) => matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock),
            _ => false,
        }
    }

    /// Node id of a remote kernel or state error.
    pub fn node(&self) -> Option<u32> {
        match self {
            ClusterError::Remote(w) => w.node,
            ClusterError::Graph(g) => g.node(),
            _ => None,
        }
    }
}
