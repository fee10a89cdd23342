//! IBP-VAE: variational autoencoders whose latent code is a sparse binary mask
//! drawn from a truncated stick-breaking Indian Buffet Process, multiplied by
//! Gaussian loadings. Also provides a Gaussian β-VAE baseline, a supervised
//! variant with a task head, and disentanglement metrics.

// Parameter checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decomposition;
pub mod distributions;
pub mod error;
pub mod mig;
pub mod models;
pub mod networks;
pub mod params;
pub mod special;
pub mod stickbreaking;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
