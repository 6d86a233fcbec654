//! The four applications on the flowhpc runtime.

pub mod cg;
pub mod error;
pub mod fft;
pub mod matmul;
pub mod reduce;
pub mod stream;
pub mod tiles;

pub use error::AppError;
