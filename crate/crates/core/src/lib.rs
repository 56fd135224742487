//! Training engine for convolutional networks with curriculum-by-smoothing:
//! every convolution's output is filtered by a fixed, non-trainable Gaussian
//! kernel whose standard deviation is annealed toward zero on a schedule, so
//! ordinary training is recovered in the limit.
//!
//! The crate is self-contained: tensors, reverse-mode differentiation, the
//! layer zoo, reference architectures, dataset ingestion, the SGD training
//! loop with curriculum hooks, and frequency-domain analysis of the
//! smoothing's low-pass effect.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod models;
pub mod nn;
pub mod smoothing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
