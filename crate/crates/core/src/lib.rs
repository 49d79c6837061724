pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fastattn;
pub mod metrics;
pub mod molgraph;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
