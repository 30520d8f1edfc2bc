//! Deterministic toy control tasks.
//!
//! Both tasks move a point by `0.1 * action` inside the box `[-1, 1]^d`,
//! with actions clamped to `[-1, 1]^d`. A step earns reward `0` and ends the
//! episode when the point is within `0.1` of a goal (before or after the
//! move), and `-1` otherwise.
//!
//! * `point_mass_2d`: one goal at `(0.7, 0)` and a reward-free decoy at
//!   `(-0.7, 0)`. Episodes start in one of two boxes centred at `(0, 0.6)`
//!   and `(0, -0.6)`.
//! * `twin_goal_1d`: goals at `-0.9` and `+0.9`, both successful; every
//!   episode starts at `0`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    PointMass2d,
    TwinGoal1d,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::PointMass2d => "point_mass_2d",
            EnvKind::TwinGoal1d => "twin_goal_1d",
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_mass_2d" => Ok(EnvKind::PointMass2d),
            "twin_goal_1d" => Ok(EnvKind::TwinGoal1d),
            other => Err(Error::Config(format!("unknown env '{other}'"))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned start box.
#[derive(Clone, Debug, PartialEq)]
pub struct StartZone {
    pub center: Vec<f64>,
    pub half_width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEnv {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub step_size: f64,
    pub goal_radius: f64,
    pub goals: Vec<Vec<f64>>,
    pub decoy: Option<Vec<f64>>,
    pub start_zones: Vec<StartZone>,
    /// Proportional gain of the scripted controllers, `a = clip(gain * (target - s))`.
    pub controller_gain: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

pub const ARENA: (f64, f64) = (-1.0, 1.0);

impl ToyEnv {
    pub fn new(kind: EnvKind) -> Self {
        match kind {
            EnvKind::PointMass2d => Self::point_mass_2d(),
            EnvKind::TwinGoal1d => Self::twin_goal_1d(),
        }
    }

    pub fn point_mass_2d() -> Self {
        Self {
            kind: EnvKind::PointMass2d,
            state_dim: 2,
            action_dim: 2,
            horizon: 100,
            step_size: 0.1,
            goal_radius: 0.1,
            goals: vec![vec![0.7, 0.0]],
            decoy: Some(vec![-0.7, 0.0]),
            start_zones: vec![
                StartZone {
                    center: vec![0.0, 0.6],
                    half_width: 0.1,
                },
                StartZone {
                    center: vec![0.0, -0.6],
                    half_width: 0.1,
                },
            ],
            controller_gain: 10.0,
        }
    }

    pub fn twin_goal_1d() -> Self {
        Self {
            kind: EnvKind::TwinGoal1d,
            state_dim: 1,
            action_dim: 1,
            horizon: 100,
            step_size: 0.1,
            goal_radius: 0.1,
            goals: vec![vec![-0.9], vec![0.9]],
            decoy: None,
            start_zones: vec![StartZone {
                center: vec![0.0],
                half_width: 0.0,
            }],
            controller_gain: 1.0,
        }
    }

    pub fn action_low(&self) -> Vec<f64> {
        vec![-1.0; self.action_dim]
    }

    pub fn action_high(&self) -> Vec<f64> {
        vec![1.0; self.action_dim]
    }

    pub fn reward_bounds(&self) -> (f64, f64) {
        (-1.0, 0.0)
    }

    /// Uniform over zones, then uniform inside the chosen box.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let zone = rng.random_range(0..self.start_zones.len());
        self.reset_in_zone(zone, rng)
    }

    pub fn reset_in_zone<R: Rng + ?Sized>(&self, zone: usize, rng: &mut R) -> Vec<f64> {
        let z = &self.start_zones[zone];
        z.center
            .iter()
            .map(|&c| {
                if z.half_width > 0.0 {
                    c + rng.random_range(-z.half_width..=z.half_width)
                } else {
                    c
                }
            })
            .collect()
    }

    pub fn at_goal(&self, state: &[f64]) -> bool {
        self.goals.iter().any(|g| dist(g, state) <= self.goal_radius)
    }

    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<StepOutcome> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(shape_err("env step: state or action has the wrong length"));
        }
        let next_state: Vec<f64> = state
            .iter()
            .zip(action)
            .map(|(&s, &a)| (s + self.step_size * a.clamp(-1.0, 1.0)).clamp(ARENA.0, ARENA.1))
            .collect();
        let success = self.at_goal(state) || self.at_goal(&next_state);
        Ok(StepOutcome {
            next_state,
            reward: if success { 0.0 } else { -1.0 },
            terminal: success,
        })
    }

    /// Proportional controller towards `target`, clamped to the action box.
    pub fn steer(&self, state: &[f64], target: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(target)
            .map(|(&s, &t)| (self.controller_gain * (t - s)).clamp(-1.0, 1.0))
            .collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goal_step_is_terminal_for_any_action() {
        let env = ToyEnv::point_mass_2d();
        for a in [[1.0, 1.0], [-1.0, 0.3], [0.0, 0.0]] {
            let out = env.step(&[0.7, 0.0], &a).unwrap();
            assert_eq!(out.reward, 0.0);
            assert!(out.terminal);
        }
    }

    #[test]
    fn zero_action_is_a_fixed_point() {
        let env = ToyEnv::point_mass_2d();
        let out = env.step(&[-0.2, 0.4], &[0.0, 0.0]).unwrap();
        assert_eq!(out.next_state, vec![-0.2, 0.4]);
        assert_eq!(out.reward, -1.0);
        assert!(!out.terminal);
    }

    #[test]
    fn unit_push_from_origin() {
        let env = ToyEnv::point_mass_2d();
        let out = env.step(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((out.next_state[0] - 0.1).abs() < 1e-15);
        assert_eq!(out.next_state[1], 0.0);
    }

    #[test]
    fn oversized_actions_are_clamped_and_arena_is_closed() {
        let env = ToyEnv::twin_goal_1d();
        let out = env.step(&[0.0], &[5.0]).unwrap();
        assert!((out.next_state[0] - 0.1).abs() < 1e-15);
        let env = ToyEnv::point_mass_2d();
        let out = env.step(&[-0.99, 0.95], &[-1.0, 1.0]).unwrap();
        assert_eq!(out.next_state, vec![-1.0, 1.0]);
    }

    #[test]
    fn twin_goal_both_goals_succeed() {
        let env = ToyEnv::twin_goal_1d();
        assert!(env.step(&[0.85], &[0.0]).unwrap().terminal);
        assert!(env.step(&[-0.85], &[0.0]).unwrap().terminal);
        assert!(!env.step(&[0.0], &[0.0]).unwrap().terminal);
    }

    #[test]
    fn kind_names() {
        for kind in [EnvKind::PointMass2d, EnvKind::TwinGoal1d] {
            assert_eq!(kind.as_str().parse::<EnvKind>().unwrap(), kind);
            assert_eq!(ToyEnv::new(kind).kind, kind);
        }
        assert!("cartpole".parse::<EnvKind>().is_err());
    }
}
