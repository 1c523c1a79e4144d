//! Image state representations for a 2D hand-eye toy task: a small
//! reverse-mode autodiff engine, a deterministic renderer, four
//! representation learners (AE, VAE, β-VAE, spatial autoencoder), latent
//! space analytics and two latent-space controllers.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod control;
pub mod error;
pub mod repr;
pub mod toyenv;

pub use error::{Error, Result};
