//! Forward inference, structural-reparameterization fusion and verification
//! for a four-stage multi-task vision transformer that segments plants and
//! classifies them into two classes.
//!
//! Every reparameterizable block exists in a *branched* training-time form
//! and a *fused* single-convolution form; [`reparam`] converts between them
//! and [`reparam::verify_equivalence`] checks they compute the same function.

pub mod cli;
pub mod config;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod reparam;
pub mod tensor;
pub mod weights;

pub use config::{ModelConfig, RunConfig};
pub use error::{Error, Result};
pub use model::{Mode, Model, PredictionBundle};
pub use tensor::Tensor;
