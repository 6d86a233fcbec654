use std::path::PathBuf;

use flowhpc_cluster::ClusterError;
use flowhpc_core::{GraphError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("tile edge {tile} does not divide {n}")]
    IndivisibleTile { n: usize, tile: usize },
    #[error("tile file {0} is missing")]
    MissingTileFile(PathBuf),
    #[error("malformed tile file {path}: {reason}")]
    BadTile { path: PathBuf, reason: String },
    #[error("tile {0} never arrived")]
    MissingTile(usize),
    #[error("expected length {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("reducer {reducer} received target {target} of the other parity class")]
    UnexpectedTargetParity { target: usize, reducer: usize },
    #[error("sanity check failed: {0}")]
    SanityCheckFailed(String),
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: u64, residual: f64 },
    #[error("breakdown at iteration {iteration}: p'Ap = {pap:e}")]
    Breakdown { iteration: u64, pap: f64 },
    #[error("reduction barrier violated on channel {channel}: {detail}")]
    BarrierViolation { channel: String, detail: String },
    #[error("solve aborted")]
    Aborted,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<GraphError> for AppError {
    fn from(e: GraphError) -> AppError {
        AppError::Cluster(ClusterError::Graph(e))
    }
}
