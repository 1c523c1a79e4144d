use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::spearman;
use super::FactorSet;
use crate::error::{Error, Result};
use crate::repr::Representation;
use crate::toyenv::{render_position, Position, TaskSpec};

/// Factor values over a regular grid of effector positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFieldMap {
    pub grid_n: usize,
    pub factor_indices: Vec<usize>,
    /// Row-major cells (y outer, x inner), each the ψ-projected latent.
    pub values: Vec<Vec<f64>>,
}

impl LatentFieldMap {
    pub fn new(grid_n: usize, factor_indices: Vec<usize>, values: Vec<Vec<f64>>) -> Result<Self> {
        if grid_n < 2 || values.len() != grid_n * grid_n {
            return Err(Error::shape("field_map", format!("{} cells for a {grid_n}x{grid_n} grid", values.len())));
        }
        if values.iter().any(|v| v.len() != factor_indices.len()) {
            return Err(Error::shape("field_map", "cell width differs from the factor count"));
        }
        Ok(LatentFieldMap { grid_n, factor_indices, values })
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.grid_n - 1) as f64
    }

    pub fn position(&self, cell: usize) -> Position {
        let s = self.spacing();
        [(cell % self.grid_n) as f64 * s, (cell / self.grid_n) as f64 * s]
    }

    pub fn at(&self, col: usize, row: usize) -> &[f64] {
        &self.values[row * self.grid_n + col]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["x".to_string(), "y".to_string()];
        header.extend(self.factor_indices.iter().map(|k| format!("z{k}")));
        w.write_record(&header)?;
        for (i, v) in self.values.iter().enumerate() {
            let p = self.position(i);
            let mut rec = vec![p[0].to_string(), p[1].to_string()];
            rec.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Renders and encodes every grid cell. Rows run in parallel and are
/// reassembled in order, so the result does not depend on the thread count.
pub fn build_field_map<R: Representation + ?Sized>(
    rep: &R,
    spec: &TaskSpec,
    factors: &FactorSet,
    grid_n: usize,
) -> Result<LatentFieldMap> {
    spec.validate()?;
    if spec.dof != 2 {
        return Err(Error::param("dof", "field maps need a 2-DOF task"));
    }
    if grid_n < 2 {
        return Err(Error::param("grid_n", format!("must be at least 2, got {grid_n}")));
    }
    if factors.is_empty() {
        return Err(Error::Contract("field map needs at least one factor".into()));
    }
    if let Some(&bad) = factors.indices.iter().find(|&&i| i >= rep.latent_size()) {
        return Err(Error::shape("field_map", format!("factor {bad} exceeds latent size {}", rep.latent_size())));
    }
    let coord = |i: usize| i as f64 / (grid_n - 1) as f64;
    let rows: Vec<Vec<Vec<f64>>> = (0..grid_n)
        .into_par_iter()
        .map(|r| {
            let positions: Vec<Position> = (0..grid_n).map(|c| [coord(c), coord(r)]).collect();
            let images: Vec<_> = positions.iter().map(|&p| render_position(p, spec)).collect();
            let frames: Vec<_> = images.iter().zip(positions.iter().copied()).collect();
            let latents = rep.encode_frames(&frames)?;
            Ok(latents.iter().map(|l| factors.project(&l.values)).collect())
        })
        .collect::<Result<_>>()?;
    LatentFieldMap::new(grid_n, factors.indices.clone(), rows.into_iter().flatten().collect())
}

/// Per axis, the largest |mean Spearman ρ| of any factor along grid lines
/// parallel to that axis. Returns `[ρ_x, ρ_y]`.
pub fn monotonicity_metric(field: &LatentFieldMap) -> Result<[f64; 2]> {
    let n = field.grid_n;
    if n < 4 {
        return Err(Error::param("grid_n", format!("monotonicity needs at least 4 cells per line, got {n}")));
    }
    let idx: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mut out = [0.0f64; 2];
    for f in 0..field.factor_indices.len() {
        for (axis, slot) in out.iter_mut().enumerate() {
            let mean = (0..n)
                .map(|line| {
                    let series: Vec<f64> =
                        (0..n).map(|s| if axis == 0 { field.at(s, line)[f] } else { field.at(line, s)[f] }).collect();
                    spearman(&idx, &series)
                })
                .sum::<f64>()
                / n as f64;
            *slot = slot.max(mean.abs());
        }
    }
    Ok(out)
}

/// Half the median latent distance between 4-neighbour grid cells.
pub fn calibrate_eps(field: &LatentFieldMap) -> f64 {
    0.5 * median_neighbor_distance(field)
}

/// Median latent distance between horizontally or vertically adjacent cells.
pub fn median_neighbor_distance(field: &LatentFieldMap) -> f64 {
    let n = field.grid_n;
    let mut d = Vec::with_capacity(2 * n * (n - 1));
    for r in 0..n {
        for c in 0..n {
            if c + 1 < n {
                d.push(dist(field.at(c, r), field.at(c + 1, r)));
            }
            if r + 1 < n {
                d.push(dist(field.at(c, r), field.at(c, r + 1)));
            }
        }
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Offsets whose task-space distance exceeds four grid spacings.
fn is_far(dx: i64, dy: i64) -> bool {
    dx * dx + dy * dy > 16
}

fn far_pair_count(n: usize) -> u64 {
    let n = n as i64;
    let total = (n * n) as u64 * (n * n - 1) as u64 / 2;
    let mut near_ordered = 0u64;
    for dx in -4..=4i64 {
        for dy in -4..=4i64 {
            if (dx, dy) != (0, 0) && !is_far(dx, dy) && dx.abs() < n && dy.abs() < n {
                near_ordered += ((n - dx.abs()) * (n - dy.abs())) as u64;
            }
        }
    }
    total - near_ordered / 2
}

/// Fraction of task-space-distant cell pairs (more than four spacings apart)
/// whose latents lie within `eps` of each other.
pub fn injectivity_metric(field: &LatentFieldMap, eps: f64) -> Result<f64> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::param("eps", format!("must be positive, got {eps}")));
    }
    let n = field.grid_n;
    let far = far_pair_count(n);
    if far == 0 {
        return Err(Error::param("grid_n", format!("a {n}x{n} grid has no distant pairs")));
    }
    // Hash on at most three coordinates: any eps-close pair is also close
    // there, so neighbouring buckets still hold every candidate.
    let hdim = field.factor_indices.len().min(3);
    let key = |v: &[f64]| -> Vec<i64> { v[..hdim].iter().map(|x| (x / eps).floor() as i64).collect() };
    let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for (i, v) in field.values.iter().enumerate() {
        buckets.entry(key(v)).or_default().push(i);
    }
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(hdim as u32))
        .map(|mut code| {
            (0..hdim)
                .map(|_| {
                    let o = (code % 3) as i64 - 1;
                    code /= 3;
                    o
                })
                .collect()
        })
        .collect();
    let eps2 = eps * eps;
    let mut collisions = 0u64;
    for (i, v) in field.values.iter().enumerate() {
        let base = key(v);
        let (ci, ri) = ((i % n) as i64, (i / n) as i64);
        for off in &offsets {
            let k: Vec<i64> = base.iter().zip(off).map(|(a, b)| a + b).collect();
            let Some(cands) = buckets.get(&k) else { continue };
            for &j in cands {
                if j <= i {
                    continue;
                }
                let (cj, rj) = ((j % n) as i64, (j / n) as i64);
                if !is_far(ci - cj, ri - rj) {
                    continue;
                }
                let d2: f64 = v.iter().zip(&field.values[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < eps2 {
                    collisions += 1;
                }
            }
        }
    }
    Ok(collisions as f64 / far as f64)
}
