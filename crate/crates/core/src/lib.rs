//! Core of the transparent-object video depth pipeline: tensor numerics with
//! reverse-mode differentiation, the invertible latent codec, the compact
//! diffusion-transformer backbone with LoRA adapters, flow-matching training,
//! stitched inference, and the evaluation protocol.

// Config checks use `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod imageio;
pub mod inference;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod video;

#[cfg(any(test, feature = "testkit"))]
#[doc(hidden)]
pub mod testkit;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use video::Video;
