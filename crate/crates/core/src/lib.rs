//! Tuning-free video editing by first-frame-conditioned DDIM inversion and
//! feature injection on a small image-to-video diffusion model.

pub mod cli;
pub mod config;
pub mod error;
pub mod features;
pub mod injection;
pub mod latent;
pub mod media;
pub mod metrics;
pub mod pipeline;
pub mod scheduler;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use latent::VideoLatent;
pub use tensor::Tensor;
