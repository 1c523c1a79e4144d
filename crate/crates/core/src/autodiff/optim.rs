use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<E: Scalar>(params: &[Tensor<E>], learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

pub trait Optimizer<E: Scalar> {
    fn step(&mut self, params: &mut [Tensor<E>], grads: &[Tensor<E>]) -> Result<()>;
}

fn check_aligned<E: Scalar>(params: &[Tensor<E>], grads: &[Tensor<E>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub state: OptimizerState,
}

impl Adam {
    pub fn new<E: Scalar>(params: &[Tensor<E>], learning_rate: f64) -> Self {
        Adam { state: OptimizerState::new(params, learning_rate) }
    }
}

impl<E: Scalar> Optimizer<E> for Adam {
    fn step(&mut self, params: &mut [Tensor<E>], grads: &[Tensor<E>]) -> Result<()> {
        check_aligned(params, grads)?;
        let s = &mut self.state;
        if s.first_moment.len() != params.len()
            || s.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::shape("optimizer_step", "accumulators do not match parameters"));
        }
        s.step += 1;
        let t = s.step as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        let (b1, b2, lr, eps) = (s.beta1, s.beta2, s.learning_rate, s.epsilon);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(s.first_moment.iter_mut().zip(s.second_moment.iter_mut()))
        {
            let slots = m.iter_mut().zip(v.iter_mut());
            for ((w, &gj), (mj, vj)) in p.data_mut().iter_mut().zip(g.data()).zip(slots) {
                let gj = gj.as_f64();
                *mj = b1 * *mj + (1.0 - b1) * gj;
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *w = E::from_f64(w.as_f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl<E: Scalar> Optimizer<E> for Sgd {
    fn step(&mut self, params: &mut [Tensor<E>], grads: &[Tensor<E>]) -> Result<()> {
        check_aligned(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, &gj) in p.data_mut().iter_mut().zip(g.data()) {
                *w = E::from_f64(w.as_f64() - self.learning_rate * gj.as_f64());
            }
        }
        Ok(())
    }
}
