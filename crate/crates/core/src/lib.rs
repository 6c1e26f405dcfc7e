//! Attention-based multichannel diffusion speech enhancement.

pub mod attention;
pub mod audio;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod net;
pub mod params;
pub mod pipeline;
pub mod scene;
pub mod sde;
pub mod stft;
pub mod tensor;
pub mod testing;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
