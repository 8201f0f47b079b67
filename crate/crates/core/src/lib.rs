//! Language-only training of a projection module for zero-shot composed
//! image retrieval, on top of a small from-scratch dual encoder.

pub mod autograd;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod optim;
pub mod par;
pub mod retrieval;
pub mod smp;
pub mod synth;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::Tensor;
