//! Guided REINFORCE: a Gaussian policy centred on the guidance action plus a
//! learned correction. Policy outputs live in normalized units, where a unit
//! vector corresponds to a full `a_max` step.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{control_loop, guidance_action, sample_start, Controller, Goal, Sensor, ServoEnv};
use crate::error::{Error, Result};
use crate::toyenv::{Action, TaskSpec};

pub const POLICY_HIDDEN: usize = 16;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReinforceConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub episodes: usize,
    /// Episodes per policy update.
    pub batch_size: usize,
    pub horizon: usize,
    pub r_goal: f64,
    /// Guidance gain on the latent error, before normalization.
    pub k_gain: f64,
    pub log_std_init: f64,
    pub seed: u64,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            gamma: 0.99,
            learning_rate: 1e-4,
            episodes: 300,
            batch_size: 10,
            horizon: 60,
            r_goal: 10.0,
            k_gain: 10.0,
            log_std_init: -1.5,
            seed: 0,
        }
    }
}

impl ReinforceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::param("gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if self.episodes == 0 || self.batch_size == 0 || self.horizon == 0 {
            return Err(Error::param("episodes", "episodes, batch_size and horizon must be positive"));
        }
        if !(self.k_gain > 0.0) {
            return Err(Error::param("k_gain", "must be positive"));
        }
        if !self.r_goal.is_finite() || !self.log_std_init.is_finite() {
            return Err(Error::param("r_goal", "r_goal and log_std_init must be finite"));
        }
        Ok(())
    }
}

/// Mean correction network `k → 16 tanh → m` and a state-independent
/// log-std per action dimension, stored as one flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub k: usize,
    pub m: usize,
    pub theta: Vec<f64>,
}

impl Policy {
    /// Small random first layer and a zero output layer, so the initial
    /// policy follows the guidance action exactly in the mean.
    pub fn new<R: Rng>(k: usize, m: usize, log_std_init: f64, rng: &mut R) -> Policy {
        let h = POLICY_HIDDEN;
        let bound = 1.0 / (k as f64).sqrt();
        let mut theta = vec![0.0; h * k + h + m * h + m + m];
        for w in &mut theta[..h * k] {
            *w = rng.random_range(-bound..bound);
        }
        let n = theta.len();
        theta[n - m..].fill(log_std_init);
        Policy { k, m, theta }
    }

    fn offsets(&self) -> [usize; 5] {
        let h = POLICY_HIDDEN;
        let w1 = 0;
        let b1 = w1 + h * self.k;
        let w2 = b1 + h;
        let b2 = w2 + self.m * h;
        let ls = b2 + self.m;
        [w1, b1, w2, b2, ls]
    }

    pub fn log_std(&self) -> &[f64] {
        &self.theta[self.offsets()[4]..]
    }

    fn forward(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let [w1, b1, w2, b2, _] = self.offsets();
        let hidden: Vec<f64> = (0..POLICY_HIDDEN)
            .map(|j| {
                let pre = self.theta[b1 + j] + (0..self.k).map(|l| self.theta[w1 + j * self.k + l] * z[l]).sum::<f64>();
                pre.tanh()
            })
            .collect();
        let mu = (0..self.m)
            .map(|i| {
                self.theta[b2 + i]
                    + (0..POLICY_HIDDEN).map(|j| self.theta[w2 + i * POLICY_HIDDEN + j] * hidden[j]).sum::<f64>()
            })
            .collect();
        (mu, hidden)
    }

    /// μ_θ(z).
    pub fn correction(&self, z: &[f64]) -> Vec<f64> {
        self.forward(z).0
    }

    /// ∇_θ log N(u; guide + μ_θ(z), diag(exp(2·log_std))).
    pub fn grad_log_prob(&self, z: &[f64], guide: &[f64], u: &[f64]) -> Vec<f64> {
        let [w1, b1, w2, b2, ls] = self.offsets();
        let (mu, hidden) = self.forward(z);
        let mut grad = vec![0.0; self.theta.len()];
        let mut g_mean = vec![0.0; self.m];
        for i in 0..self.m {
            let s = self.theta[ls + i].exp();
            if s == 0.0 {
                continue;
            }
            let d = (u[i] - guide[i] - mu[i]) / s;
            g_mean[i] = d / s;
            grad[ls + i] = d * d - 1.0;
        }
        let mut g_hidden = [0.0; POLICY_HIDDEN];
        for i in 0..self.m {
            grad[b2 + i] = g_mean[i];
            for j in 0..POLICY_HIDDEN {
                grad[w2 + i * POLICY_HIDDEN + j] = g_mean[i] * hidden[j];
                g_hidden[j] += self.theta[w2 + i * POLICY_HIDDEN + j] * g_mean[i];
            }
        }
        for j in 0..POLICY_HIDDEN {
            let g_pre = g_hidden[j] * (1.0 - hidden[j] * hidden[j]);
            grad[b1 + j] = g_pre;
            for l in 0..self.k {
                grad[w1 + j * self.k + l] = g_pre * z[l];
            }
        }
        grad
    }

    pub fn log_prob(&self, z: &[f64], guide: &[f64], u: &[f64]) -> f64 {
        let mu = self.correction(z);
        self.log_std()
            .iter()
            .enumerate()
            .map(|(i, &ls)| {
                let d = (u[i] - guide[i] - mu[i]) / ls.exp();
                -0.5 * d * d - ls - HALF_LN_2PI
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledAction {
    pub mean: Vec<f64>,
    /// Draw before clipping; the log-probability refers to this value.
    pub pre_clip: Vec<f64>,
    pub action: Action,
    pub log_prob: f64,
    pub grad_log_prob: Vec<f64>,
}

/// Draws `guide + μ_θ(z) + σ·ε`, clipped to `limit` in magnitude.
pub fn sample_action<R: Rng>(policy: &Policy, z: &[f64], guide: &[f64], limit: f64, rng: &mut R) -> SampledAction {
    let mu = policy.correction(z);
    let mean: Vec<f64> = guide.iter().zip(&mu).map(|(g, m)| g + m).collect();
    let pre_clip: Vec<f64> = mean
        .iter()
        .zip(policy.log_std())
        .map(|(m, ls)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + ls.exp() * eps
        })
        .collect();
    SampledAction {
        action: Action(pre_clip.clone()).clipped(limit),
        log_prob: policy.log_prob(z, guide, &pre_clip),
        grad_log_prob: policy.grad_log_prob(z, guide, &pre_clip),
        mean,
        pre_clip,
    }
}

/// Discounted reward-to-go for every step.
fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One policy-gradient ascent step over a batch of episodes.
///
/// The baseline at step `t` is the mean return at `t` over the episodes that
/// lasted that long.
pub fn reinforce_update(
    policy: &Policy,
    episodes: &[super::EpisodeResult],
    config: &ReinforceConfig,
) -> Result<Policy> {
    if episodes.is_empty() {
        return Err(Error::param("episodes", "empty batch"));
    }
    if let Some(ep) = episodes.iter().find(|e| e.log_prob_grads.len() != e.rewards.len()) {
        return Err(Error::Contract(format!(
            "episode has {} rewards but {} recorded gradients",
            ep.rewards.len(),
            ep.log_prob_grads.len()
        )));
    }
    let all: Vec<Vec<f64>> = episodes.iter().map(|e| returns(&e.rewards, config.gamma)).collect();
    let longest = all.iter().map(|g| g.len()).max().unwrap_or(0);
    let baseline: Vec<f64> = (0..longest)
        .map(|t| {
            let (sum, n) = all.iter().filter_map(|g| g.get(t)).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            sum / n as f64
        })
        .collect();
    let mut grad = vec![0.0; policy.theta.len()];
    for (ep, g) in episodes.iter().zip(&all) {
        for (t, glp) in ep.log_prob_grads.iter().enumerate() {
            let adv = g[t] - baseline[t];
            if adv != 0.0 {
                for (acc, v) in grad.iter_mut().zip(glp) {
                    *acc += v * adv;
                }
            }
        }
    }
    let mut next = policy.clone();
    for (w, g) in next.theta.iter_mut().zip(&grad) {
        *w += config.learning_rate * g;
    }
    if next.theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0, value: f64::NAN });
    }
    Ok(next)
}

#[allow(clippy::large_enum_variant)]
enum Mode {
    Sample(ChaCha8Rng),
    Mean,
}

/// Runs a policy in the control loop, either sampling (for training) or
/// acting on the mean (for evaluation).
pub struct PolicyController {
    policy: Policy,
    k_gain: f64,
    mode: Mode,
    grads: Vec<Vec<f64>>,
}

impl PolicyController {
    pub fn sampling(policy: Policy, k_gain: f64, rng: ChaCha8Rng) -> Self {
        PolicyController { policy, k_gain, mode: Mode::Sample(rng), grads: vec![] }
    }

    pub fn mean(policy: Policy, k_gain: f64) -> Self {
        PolicyController { policy, k_gain, mode: Mode::Mean, grads: vec![] }
    }
}

impl Controller for PolicyController {
    fn name(&self) -> &str {
        "guided-reinforce"
    }

    fn act(&mut self, z_v: &[f64], z_star: &[f64], a_max: f64) -> Result<Action> {
        let guide = guidance_action(z_star, z_v, self.policy.m, 1.0, self.k_gain)?;
        let unit = match &mut self.mode {
            Mode::Sample(rng) => {
                let s = sample_action(&self.policy, z_v, &guide.0, 1.0, rng);
                self.grads.push(s.grad_log_prob);
                s.action
            }
            Mode::Mean => {
                let mu = self.policy.correction(z_v);
                Action(guide.0.iter().zip(&mu).map(|(g, m)| g + m).collect()).clipped(1.0)
            }
        };
        Ok(Action(unit.0.iter().map(|v| v * a_max).collect()).clipped(a_max))
    }

    fn take_log_prob_grads(&mut self) -> Vec<Vec<f64>> {
        std::mem::take(&mut self.grads)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub episode_rewards: Vec<f64>,
    pub successes: Vec<bool>,
}

impl TrainingCurve {
    /// Mean reward of the first and last `fraction` of episodes.
    pub fn window_means(&self, fraction: f64) -> (f64, f64) {
        let n = self.episode_rewards.len();
        let w = ((n as f64 * fraction).round() as usize).clamp(1, n.max(1));
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        (mean(&self.episode_rewards[..w]), mean(&self.episode_rewards[n - w..]))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["episode", "reward", "success"])?;
        for (i, (r, s)) in self.episode_rewards.iter().zip(&self.successes).enumerate() {
            w.write_record([i.to_string(), r.to_string(), (*s as u8).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64 + 1);
    rng
}

/// Trains a guided policy from scratch. Episodes in a batch run in parallel,
/// each with its own RNG stream, and are merged in episode order.
pub fn train_reinforce(
    spec: &TaskSpec,
    sensor: &Sensor,
    goal: &Goal,
    config: &ReinforceConfig,
) -> Result<(Policy, TrainingCurve)> {
    config.validate()?;
    let k = sensor.factors.len();
    if k != spec.dof {
        return Err(Error::Config(format!("guided policy needs one factor per dof: {k} factors, {} dof", spec.dof)));
    }
    let goal = Goal { r_goal: config.r_goal, ..goal.clone() };
    let mut policy = Policy::new(k, spec.dof, config.log_std_init, &mut episode_rng(config.seed, 0));
    let mut curve = TrainingCurve::default();
    let mut next = 0;
    while next < config.episodes {
        let batch: Vec<usize> = (next..(next + config.batch_size).min(config.episodes)).collect();
        next += batch.len();
        let episodes = batch
            .par_iter()
            .map(|&e| {
                let mut rng = episode_rng(config.seed, e + 1);
                let start = sample_start(spec, &mut rng);
                let mut env = ServoEnv::new(spec.clone(), start)?;
                let mut ctl = PolicyController::sampling(policy.clone(), config.k_gain, rng);
                control_loop(&mut ctl, &mut env, sensor, &goal, config.horizon)
            })
            .collect::<Result<Vec<_>>>()?;
        for ep in &episodes {
            curve.episode_rewards.push(ep.total_reward());
            curve.successes.push(ep.success);
        }
        policy = reinforce_update(&policy, &episodes, config)?;
    }
    Ok((policy, curve))
}
