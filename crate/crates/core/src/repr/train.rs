use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{batch_loss_weighted, sample_noise};
use super::{EncoderSpec, Method, Model};
use crate::autodiff::{Adam, Optimizer, Tape, Var};
use crate::error::{Error, Result};
use crate::toyenv::{DemoSequence, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds shuffling and reparameterization noise.
    pub seed: u64,
    /// The KL weight ramps linearly to its full value over this many epochs.
    #[serde(default)]
    pub kl_warmup_epochs: usize,
    /// Free-form identifier of the training data, folded into the digest.
    #[serde(default)]
    pub dataset: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            kl_warmup_epochs: 0,
            dataset: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 over the encoder spec and this config.
    pub fn digest(&self, spec: &EncoderSpec) -> String {
        let json = serde_json::to_vec(&(spec, self)).expect("plain data serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Entry 0 is the untrained loss on the first batch (full KL weight);
    /// entry `e` is the mean batch loss during epoch `e`.
    pub loss_curve: Vec<f64>,
    /// Per-element reconstruction MSE over the training frames after training.
    pub final_recon_mse: f64,
}

pub fn train(spec: &EncoderSpec, dataset: &[DemoSequence], config: &TrainConfig) -> Result<(Model, TrainReport)> {
    spec.validate()?;
    config.validate()?;
    let frames: Vec<&Image> = dataset.iter().flat_map(|d| d.frames.iter()).collect();
    if frames.is_empty() {
        return Err(Error::param("dataset", "contains no frames"));
    }
    if let Some(bad) = frames.iter().find(|f| f.width != spec.image_size || f.height != spec.image_size) {
        return Err(Error::shape(
            "train",
            format!("{}x{} frame for a {}px encoder", bad.width, bad.height, spec.image_size),
        ));
    }
    let beta = spec.beta()?;
    let mut model = Model::init(spec)?;
    model.train_digest = config.digest(spec);
    let mut optimizer = Adam::new(model.params(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs + 1);

    for epoch in 1..=config.epochs {
        let ramp = match config.kl_warmup_epochs {
            0 => 1.0,
            w => (epoch as f64 / w as f64).min(1.0),
        };
        let kl_scale = if spec.method.is_variational() { ramp } else { 1.0 };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Image> = chunk.iter().map(|&i| frames[i]).collect();
            let noise =
                spec.method.is_variational().then(|| sample_noise::<f32, _>(&mut rng, batch.len(), spec.latent_size()));
            let mut tape = Tape::<f32>::new();
            let vars: Vec<Var> = model.params().iter().map(|p| tape.param(p.clone())).collect();
            if curve.is_empty() {
                curve.push(model.loss(&batch, noise.as_ref())?);
            }
            let loss = match batch_loss_weighted(&mut tape, spec, &vars, &batch, noise.as_ref(), beta, kl_scale) {
                // sigma underflowed to zero: the KL term has diverged
                Err(Error::Param { name: "sigma", .. }) => {
                    return Err(Error::NonFiniteLoss { epoch, batch: bi, value: f64::INFINITY })
                }
                other => other?,
            };
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, value });
            }
            let grads = tape.backward(loss)?;
            let grads: Vec<_> = vars.iter().map(|&v| grads.get(v)).collect();
            drop(tape);
            optimizer.step(model.params_mut(), &grads)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("{} epoch {epoch}: loss {mean:.6}", spec.method);
        curve.push(mean);
    }
    let final_recon_mse = reconstruction_mse(&model, &frames)?;
    Ok((model, TrainReport { loss_curve: curve, final_recon_mse }))
}

/// Mean squared per-element error of deterministic reconstructions.
pub fn reconstruction_mse(model: &Model, frames: &[&Image]) -> Result<f64> {
    let recon = model.reconstruct(frames)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (img, r) in frames.iter().zip(&recon) {
        let target = if model.method() == Method::Sae { img.downsample2() } else { (*img).clone() };
        for (a, b) in target.data.iter().zip(&r.data) {
            let d = (a - b) as f64;
            sum += d * d;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}
