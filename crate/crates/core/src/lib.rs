//! Diffusion-augmented generative zero-shot learning at desk scale.
//!
//! The crate covers the whole pipeline on dense feature vectors:
//! supervised-contrastive and cross-entropy encoders, a diffusion-conditioned
//! feature generator trained against three Wasserstein critics with mutual
//! learning, test-time adaptation and partial-denoise generation, GZSL
//! evaluation, and numerical checks of the diffusion overlap and contraction
//! properties.

// validation is written `!(x > 0.0)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod gan;
pub mod genstage;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod pipeline;
pub mod representations;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use mlp::{Activation, Mlp};
pub use rng::Rng;
