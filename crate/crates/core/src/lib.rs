//! Tensors, kernels and the dataflow graph executor.

pub mod codec;
pub mod device;
pub mod error;
pub mod exec;
pub mod fft;
pub mod graph;
pub mod kernels;
pub mod random;
pub mod tensor;
pub mod testing;

pub use device::{DeviceKind, DeviceName};
pub use error::{GraphError, StateError, TensorError};
pub use exec::{run, NoState, RunOptions, RunOutput, StateStore, TraceLog, TraceRecord};
pub use graph::{Graph, GraphBuilder, NodeId, NodeSpec, OpKind, QueueRef, VarRef};
pub use tensor::{Buffer, DType, Shape, Tensor};
