//! Small differentiable dual image-text encoders.
//!
//! The crate provides a vision transformer and a causal text transformer
//! projecting into a shared joint space, with hand-written backward passes:
//! pixel gradients for attack optimization and parameter gradients for the
//! bundled contrastive trainer. Weights round-trip through a simple named
//! tensor file format, and `scenes` generates the synthetic training and
//! evaluation imagery.

pub mod model;
pub mod nn;
pub mod scenes;
pub mod tensor_io;
pub mod text;
pub mod train;
pub mod vision;

pub use model::{DualEncoder, ModelConfig};
pub use tensor_io::TensorIoError;
