use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Controller, Sensor, ServoEnv};
use crate::error::{Error, Result};
use crate::toyenv::Action;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UvsConfig {
    /// Probe size per axis; `None` means the task's `a_max`.
    #[serde(default)]
    pub explore: Option<f64>,
    pub gain: f64,
    pub damping: f64,
    pub max_steps: usize,
}

impl Default for UvsConfig {
    fn default() -> Self {
        UvsConfig { explore: None, gain: 0.5, damping: 1e-3, max_steps: 100 }
    }
}

impl UvsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.explore.is_some_and(|e| !(e > 0.0)) {
            return Err(Error::param("explore", "must be positive"));
        }
        if !(self.gain > 0.0) {
            return Err(Error::param("gain", "must be positive"));
        }
        if !(self.damping > 0.0) {
            return Err(Error::param("damping", "must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::param("max_steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Linear map from effector displacement to factor change (k × m).
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianEstimate {
    pub matrix: DMatrix<f64>,
    pub damping: f64,
    /// Ratio of extreme singular values; infinite when rank-deficient.
    pub condition: f64,
    pub ill_conditioned: bool,
}

impl JacobianEstimate {
    pub fn new(matrix: DMatrix<f64>, damping: f64) -> Self {
        let sv = matrix.singular_values();
        let max = sv.max();
        let min = sv.min();
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        let degenerate = matrix.column_iter().any(|c| c.norm() < 1e-9);
        JacobianEstimate { matrix, damping, condition, ill_conditioned: degenerate }
    }
}

/// Central-difference probe of every action axis from the current position.
/// The effector is put back where it started.
pub fn uvs_init_jacobian(env: &mut ServoEnv, sensor: &Sensor, explore: f64, damping: f64) -> Result<JacobianEstimate> {
    let a_max = env.spec().a_max;
    if !(explore > 0.0 && explore <= a_max * (1.0 + 1e-12)) {
        return Err(Error::param("explore", format!("{explore} must lie in (0, a_max = {a_max}]")));
    }
    let m = env.spec().dof;
    let k = sensor.factors.len();
    let start = env.position();
    let mut j = DMatrix::zeros(k, m);
    for axis in 0..m {
        let mut probe = |sign: f64| -> Result<(f64, Vec<f64>)> {
            env.set_position(start);
            let mut a = Action::zero(m);
            a.0[axis] = sign * explore.min(a_max);
            env.step(&a)?;
            Ok((env.position()[axis], sensor.observe(env)?))
        };
        let (qp, zp) = probe(1.0)?;
        let (qm, zm) = probe(-1.0)?;
        let dq = qp - qm;
        if dq.abs() > 1e-12 {
            for r in 0..k {
                j[(r, axis)] = (zp[r] - zm[r]) / dq;
            }
        }
    }
    env.set_position(start);
    let est = JacobianEstimate::new(j, damping);
    if est.ill_conditioned {
        log::warn!("exploration produced a degenerate Jacobian column");
    }
    Ok(est)
}

/// Damped least-squares step `−λ (JᵀJ + λ_d I)⁻¹ Jᵀ e`, clipped to `a_max`.
/// Returns a zero action and flags the estimate when the system is singular.
pub fn uvs_step(j: &mut JacobianEstimate, e: &[f64], gain: f64, a_max: f64) -> Action {
    let m = j.matrix.ncols();
    let e = DVector::from_column_slice(e);
    let jt = j.matrix.transpose();
    let lhs = &jt * &j.matrix + DMatrix::identity(m, m) * j.damping;
    match lhs.cholesky() {
        Some(ch) => {
            let dq = ch.solve(&(&jt * e)) * -gain;
            if dq.iter().all(|v| v.is_finite()) {
                return Action(dq.iter().copied().collect()).clipped(a_max);
            }
            j.ill_conditioned = true;
            Action::zero(m)
        }
        None => {
            j.ill_conditioned = true;
            Action::zero(m)
        }
    }
}

/// Rank-1 secant update so that the new estimate maps `dq` exactly to `dz`.
pub fn broyden_update(j: &JacobianEstimate, dq: &[f64], dz: &[f64]) -> JacobianEstimate {
    let dq = DVector::from_column_slice(dq);
    let dz = DVector::from_column_slice(dz);
    let denom = dq.dot(&dq);
    if denom.sqrt() < 1e-12 {
        return j.clone();
    }
    let residual = dz - &j.matrix * &dq;
    JacobianEstimate::new(&j.matrix + residual * dq.transpose() / denom, j.damping)
}

/// Visual servoing with an online Jacobian estimate.
pub struct UvsController {
    pub config: UvsConfig,
    pub jacobian: Option<JacobianEstimate>,
}

impl UvsController {
    pub fn new(config: UvsConfig) -> Self {
        UvsController { config, jacobian: None }
    }
}

impl Controller for UvsController {
    fn name(&self) -> &str {
        "uvs"
    }

    fn begin(&mut self, env: &mut ServoEnv, sensor: &Sensor) -> Result<()> {
        let explore = self.config.explore.unwrap_or(env.spec().a_max);
        self.jacobian = Some(uvs_init_jacobian(env, sensor, explore, self.config.damping)?);
        Ok(())
    }

    fn act(&mut self, z_v: &[f64], z_star: &[f64], a_max: f64) -> Result<Action> {
        let j = self.jacobian.as_mut().ok_or_else(|| Error::Contract("uvs acted before exploring".into()))?;
        let e: Vec<f64> = z_v.iter().zip(z_star).map(|(a, b)| a - b).collect();
        Ok(uvs_step(j, &e, self.config.gain, a_max))
    }

    fn feedback(&mut self, dq: &[f64], dz: &[f64]) {
        if let Some(j) = &self.jacobian {
            self.jacobian = Some(broyden_update(j, dq, dz));
        }
    }
}
