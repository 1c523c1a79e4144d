//! Closed-loop control on time-varying latent factors.
//!
//! Each step renders the scene, encodes it, projects onto the factor set and
//! asks a controller for the next bounded action. Two controllers are
//! provided: uncalibrated visual servoing with Broyden updates, and a
//! guided REINFORCE policy.

mod reinforce;
mod uvs;

pub use reinforce::{
    reinforce_update, sample_action, train_reinforce, Policy, PolicyController, ReinforceConfig, SampledAction,
    TrainingCurve, POLICY_HIDDEN,
};
pub use uvs::{broyden_update, uvs_init_jacobian, uvs_step, JacobianEstimate, UvsConfig, UvsController};

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{median_neighbor_distance, FactorSet, LatentFieldMap};
use crate::error::{Error, Result};
use crate::repr::Representation;
use crate::toyenv::{render_position, step, Action, Position, TaskSpec, WorldState};

/// Workspace distance whose latent image sets the goal tolerance.
pub const GOAL_RADIUS: f64 = 0.02;

/// One effector in one toy scene.
#[derive(Clone, Debug)]
pub struct ServoEnv {
    spec: TaskSpec,
    state: WorldState,
}

impl ServoEnv {
    pub fn new(spec: TaskSpec, start: Position) -> Result<Self> {
        spec.validate()?;
        let state = WorldState::new(start, &spec);
        Ok(ServoEnv { spec, state })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn position(&self) -> Position {
        self.state.position
    }

    /// Teleports the effector, used to undo exploratory probes.
    pub fn set_position(&mut self, p: Position) {
        self.state.position = self.spec.constrain(p);
    }

    pub fn step(&mut self, action: &Action) -> Result<()> {
        self.state = step(&self.state, action, &self.spec)?;
        Ok(())
    }
}

/// Encoder followed by the factor projection ψ.
#[derive(Clone, Copy)]
pub struct Sensor<'a> {
    pub rep: &'a dyn Representation,
    pub factors: &'a FactorSet,
}

impl<'a> Sensor<'a> {
    pub fn new(rep: &'a dyn Representation, factors: &'a FactorSet) -> Self {
        Sensor { rep, factors }
    }

    pub fn observe_at(&self, p: Position, spec: &TaskSpec) -> Result<Vec<f64>> {
        let image = render_position(p, spec);
        Ok(self.factors.project(&self.rep.encode_frame(&image, p)?.values))
    }

    pub fn observe(&self, env: &ServoEnv) -> Result<Vec<f64>> {
        self.observe_at(env.position(), env.spec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub z_star: Vec<f64>,
    /// Success radius in latent units.
    pub eps_goal: f64,
    pub r_goal: f64,
}

impl Goal {
    /// Latent image of the scene with the effector resting on the target.
    pub fn at_target(sensor: &Sensor, spec: &TaskSpec, eps_goal: f64, r_goal: f64) -> Result<Goal> {
        if !(eps_goal > 0.0) {
            return Err(Error::param("eps_goal", "must be positive"));
        }
        Ok(Goal { z_star: sensor.observe_at(spec.target, spec)?, eps_goal, r_goal })
    }
}

/// Latent distance covered by `radius` workspace units, estimated from the
/// median neighbour spacing of a field map.
pub fn goal_tolerance(field: &LatentFieldMap, radius: f64) -> f64 {
    radius * median_neighbor_distance(field) / field.spacing()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Negative latent distance, plus `r_goal` inside the goal radius.
pub fn reward(z_v: &[f64], z_star: &[f64], eps_goal: f64, r_goal: f64) -> f64 {
    debug_assert_eq!(z_v.len(), z_star.len());
    let d = distance(z_v, z_star);
    if d < eps_goal {
        r_goal - d
    } else {
        -d
    }
}

/// `k_gain · (z* − z)` limited to `a_max` in magnitude.
pub fn guidance_action(z_star: &[f64], z_v: &[f64], dof: usize, a_max: f64, k_gain: f64) -> Result<Action> {
    if z_star.len() != dof || z_v.len() != dof {
        return Err(Error::Config(format!(
            "guidance needs one factor per degree of freedom: {} factors, {dof} dof",
            z_v.len()
        )));
    }
    Ok(Action(z_star.iter().zip(z_v).map(|(s, v)| k_gain * (s - v)).collect()).clipped(a_max))
}

pub trait Controller {
    fn name(&self) -> &str;

    /// Called once per episode before the first action; may probe the env.
    fn begin(&mut self, _env: &mut ServoEnv, _sensor: &Sensor) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, z_v: &[f64], z_star: &[f64], a_max: f64) -> Result<Action>;

    /// Executed displacement and the factor change it produced.
    fn feedback(&mut self, _dq: &[f64], _dz: &[f64]) {}

    /// Score-function gradients of the actions taken, for policy learners.
    fn take_log_prob_grads(&mut self) -> Vec<Vec<f64>> {
        Vec::new()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: usize,
    pub start: Position,
    /// Observed factors, one more entry than actions.
    pub latents: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub latent_errors: Vec<f64>,
    /// Reward of the state each action led to.
    pub rewards: Vec<f64>,
    /// Oracle distance to the target, diagnostics only.
    pub final_task_error: f64,
    pub diagnostic: Option<String>,
    #[serde(skip)]
    pub log_prob_grads: Vec<Vec<f64>>,
}

impl EpisodeResult {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn final_latent_error(&self) -> f64 {
        *self.latent_errors.last().expect("at least one observation")
    }

    /// `step, z…, a…, reward, latent_error`; the last row has no action.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let k = self.latents.first().map_or(0, |z| z.len());
        let m = self.actions.first().map_or(0, |a| a.len());
        let mut header = vec!["step".to_string()];
        header.extend((0..k).map(|i| format!("z{i}")));
        header.extend((0..m).map(|i| format!("a{i}")));
        header.extend(["reward".to_string(), "latent_error".to_string()]);
        w.write_record(&header)?;
        for (t, z) in self.latents.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(z.iter().map(|v| v.to_string()));
            match self.actions.get(t) {
                Some(a) => rec.extend(a.iter().map(|v| v.to_string())),
                None => rec.extend((0..m).map(|_| String::new())),
            }
            rec.push(self.rewards.get(t).map_or(String::new(), |r| r.to_string()));
            rec.push(self.latent_errors[t].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_trace_csv(&self, path: &Path) -> Result<()> {
        self.write_trace_csv(std::fs::File::create(path)?)
    }
}

/// Runs one episode until the goal is reached or `max_steps` actions have
/// been executed. A controller error or a non-finite action ends the episode
/// as a failure with a diagnostic.
pub fn control_loop(
    controller: &mut dyn Controller,
    env: &mut ServoEnv,
    sensor: &Sensor,
    goal: &Goal,
    max_steps: usize,
) -> Result<EpisodeResult> {
    if goal.z_star.len() != sensor.factors.len() {
        return Err(Error::shape(
            "control_loop",
            format!("goal has {} factors, sensor projects {}", goal.z_star.len(), sensor.factors.len()),
        ));
    }
    let start = env.position();
    let mut z = sensor.observe(env)?;
    let mut result = EpisodeResult {
        success: false,
        steps: 0,
        start,
        latent_errors: vec![distance(&z, &goal.z_star)],
        latents: vec![z.clone()],
        actions: vec![],
        rewards: vec![],
        final_task_error: 0.0,
        diagnostic: None,
        log_prob_grads: vec![],
    };
    let mut started = false;
    loop {
        if result.final_latent_error() < goal.eps_goal {
            result.success = true;
            break;
        }
        if result.steps >= max_steps {
            break;
        }
        if !started {
            started = true;
            if let Err(e) = controller.begin(env, sensor) {
                result.diagnostic = Some(format!("controller setup failed: {e}"));
                break;
            }
            env.set_position(start);
        }
        let action = match controller.act(&z, &goal.z_star, env.spec().a_max) {
            Ok(a) if a.0.iter().all(|v| v.is_finite()) => a,
            Ok(a) => {
                result.diagnostic = Some(format!("non-finite action {:?} at step {}", a.0, result.steps));
                break;
            }
            Err(e) => {
                result.diagnostic = Some(format!("controller failed at step {}: {e}", result.steps));
                break;
            }
        };
        let before = env.position();
        env.step(&action)?;
        let after = env.position();
        let next = sensor.observe(env)?;
        let dq: Vec<f64> = (0..env.spec().dof).map(|i| after[i] - before[i]).collect();
        let dz: Vec<f64> = next.iter().zip(&z).map(|(a, b)| a - b).collect();
        controller.feedback(&dq, &dz);
        result.steps += 1;
        result.rewards.push(reward(&next, &goal.z_star, goal.eps_goal, goal.r_goal));
        result.latent_errors.push(distance(&next, &goal.z_star));
        result.actions.push(action.0);
        result.latents.push(next.clone());
        z = next;
    }
    let mut grads = controller.take_log_prob_grads();
    grads.truncate(result.steps);
    result.log_prob_grads = grads;
    let p = env.position();
    let t = env.spec().target;
    result.final_task_error = (p[0] - t[0]).hypot(p[1] - t[1]);
    Ok(result)
}

/// Uniform start inside the sprite-radius margin.
pub fn sample_start<R: Rng>(spec: &TaskSpec, rng: &mut R) -> Position {
    let m = spec.sprite_radius_workspace();
    spec.constrain([rng.random_range(m..=1.0 - m), rng.random_range(m..=1.0 - m)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub start: Position,
    pub success: bool,
    pub steps: usize,
    pub final_latent_error: f64,
    pub final_task_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessStats {
    pub controller: String,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
    pub mean_steps: f64,
    pub mean_final_error: f64,
    /// Workspace distance to the target, for diagnostics only.
    pub mean_final_task_error: f64,
    pub rows: Vec<TrialRow>,
}

/// Runs `trials` episodes from seeded random starts with a fresh controller each.
pub fn evaluate_success(
    make_controller: &dyn Fn(usize) -> Box<dyn Controller>,
    spec: &TaskSpec,
    sensor: &Sensor,
    goal: &Goal,
    max_steps: usize,
    trials: usize,
    seed: u64,
) -> Result<SuccessStats> {
    evaluate_episodes(make_controller, spec, sensor, goal, max_steps, trials, seed).map(|(stats, _)| stats)
}

/// [`evaluate_success`], also returning every episode for trace export.
pub fn evaluate_episodes(
    make_controller: &dyn Fn(usize) -> Box<dyn Controller>,
    spec: &TaskSpec,
    sensor: &Sensor,
    goal: &Goal,
    max_steps: usize,
    trials: usize,
    seed: u64,
) -> Result<(SuccessStats, Vec<EpisodeResult>)> {
    if trials == 0 {
        return Err(Error::param("trials", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(trials);
    let mut episodes = Vec::with_capacity(trials);
    let mut name = String::new();
    for trial in 0..trials {
        let start = sample_start(spec, &mut rng);
        let mut controller = make_controller(trial);
        name = controller.name().to_string();
        let mut env = ServoEnv::new(spec.clone(), start)?;
        let ep = control_loop(controller.as_mut(), &mut env, sensor, goal, max_steps)?;
        if let Some(d) = &ep.diagnostic {
            log::warn!("{name} trial {trial}: {d}");
        }
        rows.push(TrialRow {
            trial,
            start,
            success: ep.success,
            steps: ep.steps,
            final_latent_error: ep.final_latent_error(),
            final_task_error: ep.final_task_error,
        });
        episodes.push(ep);
    }
    let successes = rows.iter().filter(|r| r.success).count();
    let n = trials as f64;
    let stats = SuccessStats {
        controller: name,
        trials,
        successes,
        rate: successes as f64 / n,
        mean_steps: rows.iter().map(|r| r.steps as f64).sum::<f64>() / n,
        mean_final_error: rows.iter().map(|r| r.final_latent_error).sum::<f64>() / n,
        mean_final_task_error: rows.iter().map(|r| r.final_task_error).sum::<f64>() / n,
        rows,
    };
    Ok((stats, episodes))
}
