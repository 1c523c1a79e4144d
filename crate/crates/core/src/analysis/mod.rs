//! Latent-space analytics: task maps, time-varying factor extraction,
//! α-selection scoring, task-space field maps and embodiment comparison.

mod embodiment;
mod field;
mod stats;

pub use embodiment::{
    embodiment_compare, shuffled_in_time, EmbodimentReport, FactorCorrelation, Verdict, RESAMPLE_POINTS,
};
pub use field::{
    build_field_map, calibrate_eps, injectivity_metric, median_neighbor_distance, monotonicity_metric, LatentFieldMap,
};
pub use stats::{pearson, resample_linear, spearman};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr::Representation;
use crate::toyenv::DemoSequence;

/// Default relative spread threshold for time-varying factors.
pub const DEFAULT_TAU: f64 = 0.2;

/// Latent values along one demonstration (row = frame, column = dim).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMap {
    pub rows: Vec<Vec<f64>>,
    /// Predicted posterior std per frame, variational models only.
    pub sigma: Option<Vec<Vec<f64>>>,
    pub demo: String,
    pub model: String,
}

impl TaskMap {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Values of one latent dimension over time.
    pub fn column(&self, dim: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[dim]).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.latent_dim()).map(|k| format!("z{k}")));
        w.write_record(&header)?;
        for (t, row) in self.rows.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub fn build_task_map<R: Representation + ?Sized>(
    rep: &R,
    demo: &DemoSequence,
    demo_name: &str,
    model_name: &str,
) -> Result<TaskMap> {
    let frames: Vec<_> = demo.frames.iter().zip(demo.positions.iter().copied()).collect();
    let latents = rep.encode_frames(&frames)?;
    let sigma = latents.iter().map(|l| l.sigma.clone()).collect::<Option<Vec<_>>>();
    Ok(TaskMap {
        rows: latents.into_iter().map(|l| l.values).collect(),
        sigma,
        demo: demo_name.to_string(),
        model: model_name.to_string(),
    })
}

/// Indices of the time-varying latent dimensions (the ψ selection).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSet {
    pub indices: Vec<usize>,
    pub tau: f64,
    /// Per-dimension temporal spread, one entry per latent dim.
    pub spreads: Vec<f64>,
    /// Set when every spread was zero and nothing could be selected.
    pub degenerate: bool,
}

impl FactorSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// ψ: restriction of `z` to the factor indices, in index order.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| z[i]).collect()
    }

    /// Subset keeping only `keep` (which must be members).
    pub fn restrict(&self, keep: &[usize]) -> Result<FactorSet> {
        let mut indices = keep.to_vec();
        indices.sort_unstable();
        indices.dedup();
        if let Some(bad) = indices.iter().find(|i| !self.indices.contains(i)) {
            return Err(Error::Contract(format!("index {bad} is not in the factor set {:?}", self.indices)));
        }
        Ok(FactorSet { indices, ..self.clone() })
    }

    /// The `n` members with the largest spread, returned in index order.
    pub fn dominant(&self, n: usize) -> Result<FactorSet> {
        if self.indices.len() < n {
            return Err(Error::Contract(format!("need {n} factors, only {} were selected", self.indices.len())));
        }
        let mut by_spread = self.indices.clone();
        by_spread.sort_by(|&a, &b| self.spreads[b].total_cmp(&self.spreads[a]).then(a.cmp(&b)));
        self.restrict(&by_spread[..n])
    }

    /// Treats every listed dimension as a factor, e.g. for the oracle.
    pub fn all(dim: usize) -> FactorSet {
        FactorSet { indices: (0..dim).collect(), tau: 0.0, spreads: vec![0.0; dim], degenerate: false }
    }
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Keeps the dims whose mean temporal std reaches `tau` times the largest.
pub fn extract_time_varying(maps: &[TaskMap], tau: f64) -> Result<FactorSet> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::param("tau", format!("must lie in (0, 1], got {tau}")));
    }
    let first = maps.first().ok_or_else(|| Error::param("maps", "at least one task map is required"))?;
    let dim = first.latent_dim();
    if maps.iter().any(|m| m.is_empty() || m.latent_dim() != dim || m.rows.iter().any(|r| r.len() != dim)) {
        return Err(Error::shape("extract_time_varying", "task maps must be non-empty and share one latent size"));
    }
    let spreads: Vec<f64> =
        (0..dim).map(|k| maps.iter().map(|m| population_std(&m.column(k))).sum::<f64>() / maps.len() as f64).collect();
    let max = spreads.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        log::warn!("all latent dimensions are constant over the demonstrations; no factors selected");
        return Ok(FactorSet { indices: vec![], tau, spreads, degenerate: true });
    }
    let indices = (0..dim).filter(|&k| spreads[k] >= tau * max).collect();
    Ok(FactorSet { indices, tau, spreads, degenerate: false })
}

/// Lowest-indexed complete `(x, y)` coordinate pair of a spatial-softmax code.
pub fn select_sae_pair(factors: &FactorSet) -> Result<(usize, usize)> {
    factors
        .indices
        .iter()
        .find(|&&i| i % 2 == 0 && factors.indices.contains(&(i + 1)))
        .map(|&i| (i, i + 1))
        .ok_or_else(|| Error::Contract(format!("no complete (x, y) pair among factors {:?}", factors.indices)))
}

/// `1 / (1 + Σ|v[t+1] − 2v[t] + v[t−1]|)` for a per-frame mean-σ series.
pub fn alpha_score_from_series(v: &[f64]) -> Result<f64> {
    if v.len() < 3 {
        return Err(Error::param("demo", format!("alpha score needs at least 3 frames, got {}", v.len())));
    }
    let churn: f64 = v.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs()).sum();
    Ok(1.0 / (1.0 + churn))
}

/// Smoothness of the predicted posterior spread along a demonstration.
pub fn alpha_score<R: Representation + ?Sized>(rep: &R, demo: &DemoSequence) -> Result<f64> {
    let map = build_task_map(rep, demo, "", "")?;
    let sigma =
        map.sigma.ok_or_else(|| Error::Contract("alpha score needs a variational model that predicts sigma".into()))?;
    let v: Vec<f64> = sigma.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    alpha_score_from_series(&v)
}
