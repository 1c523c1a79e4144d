use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::{pearson, resample_linear};
use super::{build_task_map, extract_time_varying, FactorSet, TaskMap};
use crate::error::{Error, Result};
use crate::repr::Representation;
use crate::toyenv::DemoSequence;

/// Trajectories are resampled to this many points before correlating.
pub const RESAMPLE_POINTS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    /// Same factors, strongly correlated trajectories.
    Consistent,
    Partial,
    /// No factor in common.
    Inconsistent,
    /// One side selected no factors at all.
    Undetermined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorCorrelation {
    pub factor: usize,
    /// Mean over demo pairs.
    pub pearson: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentReport {
    pub teacher_factors: FactorSet,
    pub executor_factors: FactorSet,
    pub jaccard: f64,
    pub correlations: Vec<FactorCorrelation>,
    /// Mean over matched factors; 0 when none matched.
    pub mean_correlation: f64,
    /// Mean full-latent distance between final frames of paired demos.
    pub final_distance: f64,
    pub verdict: Verdict,
}

fn maps<R: Representation + ?Sized>(rep: &R, demos: &[DemoSequence], who: &str) -> Result<Vec<TaskMap>> {
    demos.iter().enumerate().map(|(i, d)| build_task_map(rep, d, &format!("{who}{i}"), "")).collect()
}

/// Compares the factors a model finds on teacher demos with those it finds
/// on the same motions performed by the executor. Demos pair up by index.
pub fn embodiment_compare<R: Representation + ?Sized>(
    rep: &R,
    teacher: &[DemoSequence],
    executor: &[DemoSequence],
    tau: f64,
) -> Result<EmbodimentReport> {
    if teacher.is_empty() || teacher.len() != executor.len() {
        return Err(Error::param(
            "demos",
            format!("need equally many teacher and executor demos, got {} and {}", teacher.len(), executor.len()),
        ));
    }
    let tm = maps(rep, teacher, "teacher")?;
    let em = maps(rep, executor, "executor")?;
    let tf = extract_time_varying(&tm, tau)?;
    let ef = extract_time_varying(&em, tau)?;

    let common: Vec<usize> = tf.indices.iter().copied().filter(|i| ef.indices.contains(i)).collect();
    let union = tf.indices.len() + ef.indices.len() - common.len();
    let jaccard = if union == 0 { 0.0 } else { common.len() as f64 / union as f64 };

    let correlations: Vec<FactorCorrelation> = common
        .iter()
        .map(|&f| {
            let sum: f64 = tm
                .iter()
                .zip(&em)
                .map(|(a, b)| {
                    pearson(
                        &resample_linear(&a.column(f), RESAMPLE_POINTS),
                        &resample_linear(&b.column(f), RESAMPLE_POINTS),
                    )
                })
                .sum();
            FactorCorrelation { factor: f, pearson: sum / tm.len() as f64 }
        })
        .collect();
    let mean_correlation = if correlations.is_empty() {
        0.0
    } else {
        correlations.iter().map(|c| c.pearson).sum::<f64>() / correlations.len() as f64
    };
    let final_distance = tm
        .iter()
        .zip(&em)
        .map(|(a, b)| {
            let (za, zb) = (a.rows.last().expect("non-empty"), b.rows.last().expect("non-empty"));
            za.iter().zip(zb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / tm.len() as f64;

    let verdict = if tf.is_empty() || ef.is_empty() {
        Verdict::Undetermined
    } else if common.is_empty() {
        Verdict::Inconsistent
    } else if jaccard == 1.0 && correlations.iter().all(|c| c.pearson >= 0.9) {
        Verdict::Consistent
    } else {
        Verdict::Partial
    };
    Ok(EmbodimentReport {
        teacher_factors: tf,
        executor_factors: ef,
        jaccard,
        correlations,
        mean_correlation,
        final_distance,
        verdict,
    })
}

/// Same frames in a seeded random temporal order; destroys the motion while
/// keeping the per-frame content, for use as a negative control.
pub fn shuffled_in_time(demo: &DemoSequence, seed: u64) -> DemoSequence {
    let mut order: Vec<usize> = (0..demo.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    DemoSequence {
        spec: demo.spec.clone(),
        pattern: demo.pattern,
        positions: order.iter().map(|&i| demo.positions[i]).collect(),
        frames: order.iter().map(|&i| demo.frames[i].clone()).collect(),
    }
}
