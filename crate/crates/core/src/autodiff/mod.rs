//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Provides the layer set the representation learners need (fully
//! connected, strided convolution, ReLU/sigmoid/tanh, spatial softmax,
//! squared-error and Gaussian KL losses), Adam/SGD optimizers and a
//! finite-difference gradient checker.

mod check;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_with, ProbeSelection};
pub use kernels::{normalized_coord, ConvGeometry};
pub use optim::{Adam, Optimizer, OptimizerState, Sgd};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Spatial softmax of a single `[C, H, W]` feature stack, returning the
/// `2C` interleaved expected coordinates.
pub fn spatial_softmax<E: Scalar>(features: &Tensor<E>, temperature: f64) -> Result<Vec<f64>> {
    if features.rank() != 3 {
        return Err(Error::shape("spatial_softmax", format!("expected [C, H, W], got {:?}", features.shape())));
    }
    let s = features.shape();
    let mut tape = Tape::<E>::new();
    let x = tape.constant(features.clone().reshape(vec![1, s[0], s[1], s[2]])?);
    let out = tape.spatial_softmax(x, temperature)?;
    Ok(tape.value(out).to_f64_vec())
}

/// `½ Σ (μ² + σ² − ln σ² − 1)`: KL divergence from `N(μ, diag σ²)` to the
/// standard normal.
pub fn gaussian_kl(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::shape("gaussian_kl", format!("{} means vs {} sigmas", mu.len(), sigma.len())));
    }
    tape::gaussian_kl_sum(mu, sigma)
}
