//! Distributed execution over a framed TCP transport: task servers, remote
//! sessions, server-resident variables and queues, checkpoints, and cluster
//! specs resolved from Slurm allocations.

pub mod checkpoint;
pub mod error;
pub mod local;
pub mod proto;
pub mod queue;
pub mod server;
pub mod session;
pub mod slurm;
pub mod spec;
pub mod state;
pub mod wire;

pub use error::ClusterError;
pub use local::LocalCluster;
pub use server::{Server, ServerConfig};
pub use session::{Session, SessionOutput, SessionRunOptions};
pub use spec::{ClusterSpec, TaskAddress, TaskIdentity};
pub use wire::Framing;
