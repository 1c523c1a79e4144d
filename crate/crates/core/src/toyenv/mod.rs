//! Deterministic 2D hand-eye toy task.
//!
//! An effector sprite moves inside the unit square and a fixed cross marks
//! the target. Observations are small grayscale frames rendered without
//! noise, so every point of the task space can be sampled exactly.

mod demo;
mod image;
mod render;

pub use demo::{
    generate_demo, generate_demo_with, load_demo, sample_starts, save_demo, toy_corpus, DemoSequence, Pattern,
    DEFAULT_ARC_BULGE,
};
pub use image::Image;
pub use render::{render, render_position};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Point in the unit-square workspace.
pub type Position = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteKind {
    /// Filled disc, the demonstrator's "hand".
    Teacher,
    /// Filled square of equal area, the executing robot's effector.
    Executor,
}

impl SpriteKind {
    pub fn label(self) -> &'static str {
        match self {
            SpriteKind::Teacher => "teacher",
            SpriteKind::Executor => "executor",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// 1 constrains motion to the x axis at the target's height.
    pub dof: usize,
    pub target: Position,
    pub image_size: usize,
    pub sprite: SpriteKind,
    /// Sprite radius in pixels.
    pub sprite_radius: f64,
    /// Largest action magnitude, in workspace units.
    pub a_max: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            dof: 2,
            target: [0.65, 0.4],
            image_size: 32,
            sprite: SpriteKind::Teacher,
            sprite_radius: 3.0,
            a_max: 0.05,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dof != 1 && self.dof != 2 {
            return Err(Error::param("dof", format!("must be 1 or 2, got {}", self.dof)));
        }
        if !self.target.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::param("target", format!("{:?} outside the unit square", self.target)));
        }
        if self.image_size < 16 {
            return Err(Error::param("image_size", format!("must be at least 16, got {}", self.image_size)));
        }
        if !(self.sprite_radius > 0.0) {
            return Err(Error::param("sprite_radius", "must be positive"));
        }
        if self.span_px() <= 0.0 {
            return Err(Error::param(
                "sprite_radius",
                format!("sprite of radius {} does not fit a {}px image", self.sprite_radius, self.image_size),
            ));
        }
        if !(self.a_max > 0.0) {
            return Err(Error::param("a_max", "must be positive"));
        }
        Ok(())
    }

    pub fn with_sprite(&self, sprite: SpriteKind) -> TaskSpec {
        TaskSpec { sprite, ..self.clone() }
    }

    /// Pixel gap between the image border and the extreme sprite centers.
    pub fn margin_px(&self) -> f64 {
        self.sprite_radius + 1.0
    }

    /// Pixel distance covered by one workspace unit.
    pub fn span_px(&self) -> f64 {
        self.image_size as f64 - 2.0 * self.margin_px()
    }

    /// Continuous pixel coordinates of a workspace point (x right, y down).
    pub fn to_pixel(&self, p: Position) -> (f64, f64) {
        let m = self.margin_px();
        let s = self.span_px();
        (m + p[0] * s, m + p[1] * s)
    }

    /// Sprite radius expressed in workspace units.
    pub fn sprite_radius_workspace(&self) -> f64 {
        self.sprite_radius / self.span_px()
    }

    /// Clamps into the workspace and onto the motion line for 1-DOF tasks.
    pub fn constrain(&self, p: Position) -> Position {
        let x = p[0].clamp(0.0, 1.0);
        let y = if self.dof == 1 { self.target[1] } else { p[1].clamp(0.0, 1.0) };
        [x, y]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub position: Position,
    pub steps: usize,
}

impl WorldState {
    pub fn new(position: Position, spec: &TaskSpec) -> Self {
        WorldState { position: spec.constrain(position), steps: 0 }
    }
}

/// Effector displacement; its length equals the task's degrees of freedom.
#[derive(Clone, Debug, PartialEq)]
pub struct Action(pub Vec<f64>);

impl Action {
    pub fn zero(dof: usize) -> Self {
        Action(vec![0.0; dof])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales the action down to at most `limit` magnitude, keeping direction.
    pub fn clipped(mut self, limit: f64) -> Self {
        let n = self.norm();
        if n > limit && n > 0.0 {
            let s = limit / n;
            self.0.iter_mut().for_each(|v| *v *= s);
        }
        self
    }
}

/// Applies a bounded position increment, clamping to the workspace.
pub fn step(state: &WorldState, action: &Action, spec: &TaskSpec) -> Result<WorldState> {
    if action.0.len() != spec.dof {
        return Err(Error::shape(
            "step",
            format!("action has {} components but the task has {} dof", action.0.len(), spec.dof),
        ));
    }
    if !action.0.iter().all(|v| v.is_finite()) {
        return Err(Error::param("action", "non-finite component"));
    }
    if action.norm() > spec.a_max * (1.0 + 1e-9) {
        return Err(Error::param("action", format!("magnitude {} exceeds a_max {}", action.norm(), spec.a_max)));
    }
    let dy = if spec.dof == 2 { action.0[1] } else { 0.0 };
    let moved = [state.position[0] + action.0[0], state.position[1] + dy];
    Ok(WorldState { position: spec.constrain(moved), steps: state.steps + 1 })
}

/// Row-major `grid_n × grid_n` lattice over the workspace (y outer, x inner).
pub fn grid_positions(grid_n: usize) -> Result<Vec<Position>> {
    if grid_n < 2 {
        return Err(Error::param("grid_n", format!("must be at least 2, got {grid_n}")));
    }
    let coord = |i: usize| i as f64 / (grid_n - 1) as f64;
    Ok((0..grid_n).flat_map(|r| (0..grid_n).map(move |c| [coord(c), coord(r)])).collect())
}

/// Lazily renders every grid position; nothing is retained between items.
pub fn sample_task_space(spec: &TaskSpec, grid_n: usize) -> Result<impl Iterator<Item = (Position, Image)> + '_> {
    spec.validate()?;
    let positions = grid_positions(grid_n)?;
    Ok(positions.into_iter().map(move |p| (p, render_position(p, spec))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec::default()
    }

    #[test]
    fn step_adds_displacement() {
        let s = WorldState::new([0.5, 0.5], &spec());
        let next = step(&s, &Action(vec![0.02, 0.0]), &spec()).unwrap();
        assert!((next.position[0] - 0.52).abs() < 1e-12);
        assert_eq!(next.position[1], 0.5);
        assert_eq!(next.steps, 1);
    }

    #[test]
    fn step_clamps_at_boundary() {
        let s = WorldState::new([0.99, 0.5], &spec());
        let next = step(&s, &Action(vec![0.05, 0.0]), &spec()).unwrap();
        assert_eq!(next.position, [1.0, 0.5]);
    }

    #[test]
    fn zero_action_is_identity() {
        let s = WorldState::new([0.3, 0.7], &spec());
        let next = step(&s, &Action::zero(2), &spec()).unwrap();
        assert_eq!(next.position, s.position);
    }

    #[test]
    fn wrong_action_dimension_is_an_error() {
        let s = WorldState::new([0.3, 0.7], &spec());
        assert!(step(&s, &Action(vec![0.01]), &spec()).is_err());
    }

    #[test]
    fn one_dof_moves_only_along_x() {
        let one = TaskSpec { dof: 1, ..spec() };
        let s = WorldState::new([0.2, 0.9], &one);
        assert_eq!(s.position[1], one.target[1]);
        let next = step(&s, &Action(vec![0.04]), &one).unwrap();
        assert!((next.position[0] - 0.24).abs() < 1e-12);
        assert_eq!(next.position[1], one.target[1]);
    }

    #[test]
    fn grid_of_two_is_the_corners() {
        let g = grid_positions(2).unwrap();
        assert_eq!(g, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        assert!(grid_positions(1).is_err());
    }

    #[test]
    fn task_space_stream_counts() {
        let s = spec();
        assert_eq!(sample_task_space(&s, 2).unwrap().count(), 4);
        assert_eq!(grid_positions(64).unwrap().len(), 4096);
        assert_eq!(grid_positions(580).unwrap().len(), 336_400);
    }

    #[test]
    fn spec_validation() {
        assert!(spec().validate().is_ok());
        assert!(TaskSpec { image_size: 8, ..spec() }.validate().is_err());
        assert!(TaskSpec { target: [1.2, 0.0], ..spec() }.validate().is_err());
        assert!(TaskSpec { dof: 3, ..spec() }.validate().is_err());
        assert!(TaskSpec { sprite_radius: 20.0, ..spec() }.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn step_stays_in_bounds(x in 0.0f64..=1.0, y in 0.0f64..=1.0,
                                    ang in 0.0f64..std::f64::consts::TAU, frac in 0.0f64..=1.0) {
                let s = spec();
                let st = WorldState::new([x, y], &s);
                let a = Action(vec![s.a_max * frac * ang.cos(), s.a_max * frac * ang.sin()]);
                let next = step(&st, &a, &s).unwrap();
                prop_assert!(next.position.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
