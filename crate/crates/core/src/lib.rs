//! Autoencoder laboratory: a small autodiff engine, three autoencoder
//! families (feedforward, convolutional, latent diffusion), dataset
//! ingestion, training with checkpoints, and reconstruction evaluation
//! including a blinded mean-opinion-score study backend.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;
#[cfg(any(test, feature = "testing"))]
pub mod testing;

pub use error::{Error, Result};
pub use model::{Family, InputDims, Model, ModelSpec};
pub use tensor::{Element, Tape, Tensor, Var};
