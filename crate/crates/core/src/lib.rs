//! Low-rank modal adaptation for multimodal backbones.

pub mod adaptor;
pub mod allocator;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
