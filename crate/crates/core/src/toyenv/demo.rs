use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_position, Image, Position, SpriteKind, TaskSpec};
use crate::error::{Error, Result};

/// Sagitta of an arc path as a fraction of its chord length.
pub const DEFAULT_ARC_BULGE: f64 = 0.2;
/// Starts closer than this to the target are resampled.
const MIN_START_DISTANCE: f64 = 0.35;
const MAX_START_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Straight,
    Arc,
}

impl Pattern {
    pub fn label(self) -> &'static str {
        match self {
            Pattern::Straight => "straight",
            Pattern::Arc => "arc",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSequence {
    pub spec: TaskSpec,
    pub pattern: Pattern,
    pub positions: Vec<Position>,
    pub frames: Vec<Image>,
}

impl DemoSequence {
    pub fn sprite(&self) -> SpriteKind {
        self.spec.sprite
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Same trajectory rendered with a different sprite.
    pub fn with_sprite(&self, sprite: SpriteKind) -> DemoSequence {
        let spec = self.spec.with_sprite(sprite);
        let frames = self.positions.iter().map(|&p| render_position(p, &spec)).collect();
        DemoSequence { spec, pattern: self.pattern, positions: self.positions.clone(), frames }
    }
}

pub fn generate_demo(
    spec: &TaskSpec,
    pattern: Pattern,
    start: Position,
    steps: usize,
    seed: u64,
) -> Result<DemoSequence> {
    generate_demo_with(spec, pattern, start, steps, seed, DEFAULT_ARC_BULGE)
}

/// Renders a path from `start` to the target. The seed only decides which
/// side an arc bulges to; straight paths ignore it.
pub fn generate_demo_with(
    spec: &TaskSpec,
    pattern: Pattern,
    start: Position,
    steps: usize,
    seed: u64,
    bulge: f64,
) -> Result<DemoSequence> {
    spec.validate()?;
    if steps == 0 {
        return Err(Error::param("steps", "a demonstration needs at least one step"));
    }
    if !start.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::param("start", format!("{start:?} outside the unit square")));
    }
    let start = spec.constrain(start);
    let target = spec.target;
    let chord = [target[0] - start[0], target[1] - start[1]];
    let length = chord[0].hypot(chord[1]);
    let positions = if length == 0.0 {
        vec![target]
    } else {
        match pattern {
            Pattern::Straight => straight_path(start, target, steps),
            Pattern::Arc => {
                if spec.dof != 2 {
                    return Err(Error::param("pattern", "arc paths need two degrees of freedom"));
                }
                if !(bulge > 0.0 && bulge < 0.5) {
                    return Err(Error::param("bulge", format!("must lie in (0, 0.5), got {bulge}")));
                }
                let side = if ChaCha8Rng::seed_from_u64(seed).random::<bool>() { 1.0 } else { -1.0 };
                arc_path(start, target, steps, bulge, side).into_iter().map(|p| spec.constrain(p)).collect()
            }
        }
    };
    let frames = positions.iter().map(|&p| render_position(p, spec)).collect();
    Ok(DemoSequence { spec: spec.clone(), pattern, positions, frames })
}

fn straight_path(start: Position, target: Position, steps: usize) -> Vec<Position> {
    let mut out: Vec<Position> = (0..=steps)
        .map(|i| {
            let f = i as f64 / steps as f64;
            [start[0] + (target[0] - start[0]) * f, start[1] + (target[1] - start[1]) * f]
        })
        .collect();
    out[steps] = target;
    out
}

/// Minor circular arc with sagitta `bulge·|chord|` on the `side` of the chord.
fn arc_path(start: Position, target: Position, steps: usize, bulge: f64, side: f64) -> Vec<Position> {
    let (dx, dy) = (target[0] - start[0], target[1] - start[1]);
    let length = dx.hypot(dy);
    let d = [dx / length, dy / length];
    let n = [-d[1] * side, d[0] * side];
    let h = bulge * length;
    let radius = (length * length / 4.0 + h * h) / (2.0 * h);
    let half_angle = (length / (2.0 * radius)).asin();
    let mid = [(start[0] + target[0]) / 2.0, (start[1] + target[1]) / 2.0];
    let center = [mid[0] - n[0] * (radius - h), mid[1] - n[1] * (radius - h)];
    let mut out: Vec<Position> = (0..=steps)
        .map(|i| {
            let u = -half_angle + 2.0 * half_angle * i as f64 / steps as f64;
            let (s, c) = u.sin_cos();
            [center[0] + radius * (c * n[0] + s * d[0]), center[1] + radius * (c * n[1] + s * d[1])]
        })
        .collect();
    out[0] = start;
    out[steps] = target;
    out
}

/// Seeded demonstration starts inside the sprite-radius margin and away
/// from the target.
pub fn sample_starts(spec: &TaskSpec, count: usize, seed: u64) -> Result<Vec<Position>> {
    spec.validate()?;
    let margin = spec.sprite_radius_workspace();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut found = None;
        for _ in 0..MAX_START_ATTEMPTS {
            let p = spec.constrain([rng.random_range(margin..=1.0 - margin), rng.random_range(margin..=1.0 - margin)]);
            let dist = (p[0] - spec.target[0]).hypot(p[1] - spec.target[1]);
            if dist >= MIN_START_DISTANCE {
                found = Some(p);
                break;
            }
        }
        out.push(found.ok_or_else(|| Error::param("target", "no start position lies far enough from the target"))?);
    }
    Ok(out)
}

/// `count` demonstrations sharing one pattern, from seeded starts.
pub fn toy_corpus(
    spec: &TaskSpec,
    pattern: Pattern,
    count: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<DemoSequence>> {
    if count == 0 {
        return Err(Error::param("sequences", "at least one demonstration is required"));
    }
    sample_starts(spec, count, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, start)| generate_demo(spec, pattern, start, steps, seed.wrapping_add(i as u64 + 1)))
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoManifest {
    spec: TaskSpec,
    pattern: Pattern,
    positions: Vec<Position>,
    frames: Vec<String>,
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.pgm")
}

pub fn save_demo(demo: &DemoSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, frame) in demo.frames.iter().enumerate() {
        fs::write(dir.join(frame_name(i)), frame.to_pgm())?;
    }
    let manifest = DemoManifest {
        spec: demo.spec.clone(),
        pattern: demo.pattern,
        positions: demo.positions.clone(),
        frames: (0..demo.frames.len()).map(frame_name).collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_demo(dir: &Path) -> Result<DemoSequence> {
    let manifest: DemoManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    manifest.spec.validate()?;
    if manifest.frames.len() != manifest.positions.len() || manifest.frames.is_empty() {
        return Err(Error::Demo(format!(
            "{}: {} frames but {} positions",
            dir.display(),
            manifest.frames.len(),
            manifest.positions.len()
        )));
    }
    let n = manifest.spec.image_size;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for name in &manifest.frames {
        let img = Image::from_pgm(&fs::read(dir.join(name))?)?;
        if img.width != n || img.height != n {
            return Err(Error::Demo(format!("{name}: {}x{} frame in a {n}px task", img.width, img.height)));
        }
        frames.push(img);
    }
    Ok(DemoSequence { spec: manifest.spec, pattern: manifest.pattern, positions: manifest.positions, frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diagonal_spec() -> TaskSpec {
        TaskSpec { target: [0.9, 0.9], ..TaskSpec::default() }
    }

    #[test]
    fn straight_demo_on_the_diagonal() {
        let demo = generate_demo(&diagonal_spec(), Pattern::Straight, [0.1, 0.1], 16, 0).unwrap();
        assert_eq!(demo.len(), 17);
        for (i, p) in demo.positions.iter().enumerate() {
            let expect = 0.1 + 0.05 * i as f64;
            assert!((p[0] - expect).abs() < 1e-9 && (p[1] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn straight_positions_are_affine_in_time() {
        let spec = TaskSpec::default();
        let demo = generate_demo(&spec, Pattern::Straight, [0.13, 0.82], 23, 5).unwrap();
        let (a, b) = (demo.positions[0], demo.positions[23]);
        for (i, p) in demo.positions.iter().enumerate() {
            let f = i as f64 / 23.0;
            for k in 0..2 {
                assert!((p[k] - (a[k] + (b[k] - a[k]) * f)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn demos_are_deterministic() {
        let spec = TaskSpec::default();
        for pattern in [Pattern::Straight, Pattern::Arc] {
            let a = generate_demo(&spec, pattern, [0.1, 0.8], 20, 9).unwrap();
            let b = generate_demo(&spec, pattern, [0.1, 0.8], 20, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn frames_rerender_exactly() {
        let spec = TaskSpec::default();
        let demo = generate_demo(&spec, Pattern::Arc, [0.2, 0.85], 24, 3).unwrap();
        for (p, f) in demo.positions.iter().zip(&demo.frames) {
            assert_eq!(&render_position(*p, &spec), f);
        }
    }

    #[test]
    fn arc_bulges_off_the_chord() {
        let spec = TaskSpec::default();
        let start = [0.15, 0.85];
        let demo = generate_demo(&spec, Pattern::Arc, start, 24, 1).unwrap();
        let t = spec.target;
        let (dx, dy) = (t[0] - start[0], t[1] - start[1]);
        let len = dx.hypot(dy);
        let off = |p: &Position| ((p[0] - start[0]) * dy - (p[1] - start[1]) * dx).abs() / len;
        let max_off = demo.positions.iter().map(off).fold(0.0, f64::max);
        assert!((max_off - DEFAULT_ARC_BULGE * len).abs() < 0.01 * len, "{max_off}");
        assert_eq!(*demo.positions.last().unwrap(), t);
        assert_eq!(demo.positions[0], start);
    }

    #[test]
    fn start_at_target_is_single_frame() {
        let spec = TaskSpec::default();
        let demo = generate_demo(&spec, Pattern::Straight, spec.target, 10, 0).unwrap();
        assert_eq!(demo.len(), 1);
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let spec = TaskSpec::default();
        assert!(generate_demo(&spec, Pattern::Straight, [0.1, 0.1], 0, 0).is_err());
        assert!(generate_demo(&spec, Pattern::Straight, [1.1, 0.1], 5, 0).is_err());
        assert!(generate_demo_with(&spec, Pattern::Arc, [0.1, 0.1], 5, 0, 0.7).is_err());
        let one = TaskSpec { dof: 1, ..spec };
        assert!(generate_demo(&one, Pattern::Arc, [0.1, 0.1], 5, 0).is_err());
    }

    #[test]
    fn corpus_has_three_distinct_sequences() {
        let spec = TaskSpec::default();
        let corpus = toy_corpus(&spec, Pattern::Straight, 3, 24, 11).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_ne!(corpus[0].positions[0], corpus[1].positions[0]);
        let m = spec.sprite_radius_workspace();
        for d in &corpus {
            let s = d.positions[0];
            assert!(s.iter().all(|v| (m..=1.0 - m).contains(v)));
        }
        assert!(toy_corpus(&spec, Pattern::Straight, 0, 24, 11).is_err());
    }

    #[test]
    fn one_dof_corpus_stays_on_the_line() {
        let spec = TaskSpec { dof: 1, ..TaskSpec::default() };
        for d in toy_corpus(&spec, Pattern::Straight, 3, 24, 2).unwrap() {
            assert!(d.positions.iter().all(|p| p[1] == spec.target[1]));
        }
    }

    #[test]
    fn sprite_swap_keeps_positions() {
        let spec = TaskSpec::default();
        let demo = generate_demo(&spec, Pattern::Straight, [0.2, 0.2], 8, 0).unwrap();
        let exec = demo.with_sprite(SpriteKind::Executor);
        assert_eq!(exec.positions, demo.positions);
        assert_eq!(exec.sprite(), SpriteKind::Executor);
        assert_ne!(exec.frames, demo.frames);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TaskSpec::default();
        let demo = generate_demo(&spec, Pattern::Arc, [0.2, 0.8], 12, 4).unwrap();
        save_demo(&demo, dir.path()).unwrap();
        assert!(dir.path().join("frame_0012.pgm").exists());
        let back = load_demo(dir.path()).unwrap();
        assert_eq!(back, demo);
    }

    #[test]
    fn load_rejects_missing_frames() {
        let dir = tempfile::tempdir().unwrap();
        let demo = generate_demo(&TaskSpec::default(), Pattern::Straight, [0.2, 0.8], 4, 0).unwrap();
        save_demo(&demo, dir.path()).unwrap();
        fs::remove_file(dir.path().join("frame_0002.pgm")).unwrap();
        assert!(load_demo(dir.path()).is_err());
    }
}
