//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use latentservo_core::control::{ReinforceConfig, UvsConfig};
use latentservo_core::repr::{EncoderSpec, Method, TrainConfig};
use latentservo_core::toyenv::{Pattern, SpriteKind, TaskSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Offsets every seed below, so one flag reseeds the whole run.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    pub demos: DemoConfig,
    pub methods: Vec<MethodConfig>,
    pub analysis: AnalysisConfig,
    pub control: ControlConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    pub teacher_sequences: usize,
    pub executor_sequences: usize,
    pub steps: usize,
    pub pattern: Pattern,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub encoder: EncoderSpec,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub tau: f64,
    pub grid_n: usize,
    pub alpha_sweep: Vec<f64>,
    pub alpha_sweep_epochs: usize,
    /// Methods additionally trained on the one-DOF variant of the task.
    pub dof_compare: Vec<Method>,
    /// Extra latent sizes trained by `train` for the non-SAE methods.
    #[serde(default)]
    pub latent_dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub trials: usize,
    /// Goal radius in workspace units.
    pub goal_radius: f64,
    /// Independent REINFORCE runs, seeded `reinforce.seed + i`.
    pub reinforce_runs: usize,
    pub seed: u64,
    pub uvs: UvsConfig,
    pub reinforce: ReinforceConfig,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let core = |e: latentservo_core::Error| invalid(e.to_string());
        self.task.validate().map_err(core)?;
        if self.task.sprite != SpriteKind::Teacher {
            return Err(invalid("task.sprite must be \"teacher\"; executor demos swap the sprite themselves"));
        }
        let d = &self.demos;
        if d.teacher_sequences == 0 || d.executor_sequences == 0 {
            return Err(invalid("demos: at least one teacher and one executor sequence are required"));
        }
        if d.steps < 2 {
            return Err(invalid("demos.steps must be at least 2"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods: at least one method is required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            m.encoder.validate().map_err(|e| invalid(format!("methods[{i}].encoder: {e}")))?;
            m.train.validate().map_err(|e| invalid(format!("methods[{i}].train: {e}")))?;
            if m.encoder.image_size != self.task.image_size {
                return Err(invalid(format!(
                    "methods[{i}]: image_size {} differs from task.image_size {}",
                    m.encoder.image_size, self.task.image_size
                )));
            }
            if self.methods[..i].iter().any(|o| o.encoder.method == m.encoder.method) {
                return Err(invalid(format!("methods: {} listed twice", m.encoder.method)));
            }
        }
        let a = &self.analysis;
        if !(a.tau > 0.0 && a.tau <= 1.0) {
            return Err(invalid(format!("analysis.tau must lie in (0, 1], got {}", a.tau)));
        }
        if a.grid_n < 4 {
            return Err(invalid("analysis.grid_n must be at least 4"));
        }
        if a.alpha_sweep.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(invalid("analysis.alpha_sweep values must be positive"));
        }
        if !a.alpha_sweep.is_empty() && self.method(Method::Bvae).is_none() {
            return Err(invalid("analysis.alpha_sweep needs a bvae entry in methods"));
        }
        if a.alpha_sweep_epochs == 0 {
            return Err(invalid("analysis.alpha_sweep_epochs must be positive"));
        }
        for m in &a.dof_compare {
            if self.method(*m).is_none() {
                return Err(invalid(format!("analysis.dof_compare: {m} is not in methods")));
            }
        }
        if a.latent_dims.contains(&0) {
            return Err(invalid("analysis.latent_dims must be positive"));
        }
        let c = &self.control;
        if c.trials == 0 || c.reinforce_runs == 0 {
            return Err(invalid("control.trials and control.reinforce_runs must be positive"));
        }
        if !(c.goal_radius > 0.0 && c.goal_radius < 1.0) {
            return Err(invalid("control.goal_radius must lie in (0, 1)"));
        }
        c.uvs.validate().map_err(|e| invalid(format!("control.uvs: {e}")))?;
        c.reinforce.validate().map_err(|e| invalid(format!("control.reinforce: {e}")))?;
        Ok(())
    }

    pub fn method(&self, m: Method) -> Option<&MethodConfig> {
        self.methods.iter().find(|c| c.encoder.method == m)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_of(self)
    }

    /// Copy with every seed offset by the global seed.
    pub fn seeded(&self) -> ExperimentConfig {
        let s = self.seed;
        let mut c = self.clone();
        c.demos.seed = c.demos.seed.wrapping_add(s);
        for m in &mut c.methods {
            m.encoder.seed = m.encoder.seed.wrapping_add(s);
            m.train.seed = m.train.seed.wrapping_add(s);
        }
        c.control.seed = c.control.seed.wrapping_add(s);
        c.control.reinforce.seed = c.control.reinforce.seed.wrapping_add(s);
        c
    }
}

pub fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("plain data serializes");
    hex::encode(Sha256::digest(json))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = include_str!("../../../configs/toy.toml");

    #[test]
    fn shipped_config_parses() {
        let cfg = ExperimentConfig::from_toml(TOY).unwrap();
        assert_eq!(cfg.methods.len(), 4);
        assert_eq!(cfg.demos.teacher_sequences, 3);
        assert_eq!(cfg.analysis.alpha_sweep, vec![0.1, 1.0, 10.0]);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = TOY.replacen("[demos]", "[demos]\nbogus = 1", 1);
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CliError::Config(m)) if m.contains("bogus")));
    }

    #[test]
    fn schema_version_is_checked() {
        let text = TOY.replacen("schema_version = 1", "schema_version = 7", 1);
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CliError::Config(m)) if m.contains("schema_version")));
    }

    #[test]
    fn zero_sequences_is_invalid() {
        let text = TOY.replacen("teacher_sequences = 3", "teacher_sequences = 0", 1);
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn nested_validation_reaches_core_types() {
        let text = TOY.replacen("tau = 0.2", "tau = 1.5", 1);
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = TOY.replacen("gamma = 0.99", "gamma = 1.5", 1);
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn global_seed_offsets_every_stream() {
        let mut cfg = ExperimentConfig::from_toml(TOY).unwrap();
        cfg.seed = 5;
        let s = cfg.seeded();
        assert_eq!(s.demos.seed, cfg.demos.seed + 5);
        assert_eq!(s.control.reinforce.seed, cfg.control.reinforce.seed + 5);
        assert!(s.methods.iter().zip(&cfg.methods).all(|(a, b)| a.train.seed == b.train.seed + 5));
        assert_ne!(s.digest(), cfg.digest());
    }
}
