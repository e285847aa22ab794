//! Cliff-edge gridworld with slippery moves.
//!
//! The grid is 6 wide and 4 tall. The agent starts at `(0, 0)`, the goal is
//! `(5, 0)`, and cells `(1..=4, 0)` between them are pits. Actions are
//! `0 = up (+y)`, `1 = right`, `2 = down`, `3 = left`. With probability
//! `slip_prob` the move is replaced by a perpendicular one. For horizontal moves
//! the slip goes down (toward the pits) with probability `(1 + wind_bias) / 2`;
//! vertical moves slip left or right with equal probability. Moving into the
//! border leaves the agent in place.
//!
//! Every step pays `step_cost`; reaching the goal adds `+1`, falling into a pit
//! adds `-1`, and both end the episode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bad_field, Env, EnvError, EnvState, PhysicsParams, StepOutcome, Variant};
use crate::seed::rng_from;

pub const WIDTH: i32 = 6;
pub const HEIGHT: i32 = 4;
pub const HORIZON: usize = 200;
pub(crate) const MAX_STEP_COST: f64 = 1.0;
const GOAL: (i32, i32) = (5, 0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSlipPhysics {
    pub slip_prob: f64,
    pub wind_bias: f64,
    pub step_cost: f64,
}

impl GridSlipPhysics {
    pub const FIELDS: [&'static str; 3] = ["slip_prob", "wind_bias", "step_cost"];

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return Err(bad_field("slip_prob", format!("{} not in [0, 1]", self.slip_prob)));
        }
        if !(-1.0..=1.0).contains(&self.wind_bias) {
            return Err(bad_field("wind_bias", format!("{} not in [-1, 1]", self.wind_bias)));
        }
        if !self.step_cost.is_finite() || self.step_cost.abs() > MAX_STEP_COST {
            return Err(bad_field("step_cost", format!("|{}| exceeds {MAX_STEP_COST}", self.step_cost)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GridSlip {
    variant: Variant,
    physics: GridSlipPhysics,
    pos: (i32, i32),
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

fn is_pit(pos: (i32, i32)) -> bool {
    pos.1 == 0 && (1..=4).contains(&pos.0)
}

fn delta(action: usize) -> (i32, i32) {
    match action {
        0 => (0, 1),
        1 => (1, 0),
        2 => (0, -1),
        _ => (-1, 0),
    }
}

impl GridSlip {
    pub fn new(variant: Variant, physics: GridSlipPhysics) -> Result<Self, EnvError> {
        physics.validate()?;
        Ok(Self { variant, physics, pos: (0, 0), steps: 0, done: false, rng: rng_from(&[0]) })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn position(&self) -> (i32, i32) {
        self.pos
    }

    fn state(&self) -> EnvState {
        EnvState { obs: vec![self.pos.0 as f64, self.pos.1 as f64], done: self.done, step: self.steps }
    }

    /// Move actually executed for an intended action given two uniforms.
    fn realized_move(&self, action: usize, u_slip: f64, u_dir: f64) -> usize {
        if u_slip >= self.physics.slip_prob {
            return action;
        }
        match action {
            // horizontal: down with probability (1 + wind) / 2, else up
            1 | 3 => {
                if u_dir < 0.5 * (1.0 + self.physics.wind_bias) {
                    2
                } else {
                    0
                }
            }
            _ => {
                if u_dir < 0.5 {
                    3
                } else {
                    1
                }
            }
        }
    }
}

impl Env for GridSlip {
    fn n_actions(&self) -> usize {
        4
    }

    fn n_features(&self) -> usize {
        (WIDTH * HEIGHT) as usize
    }

    fn horizon(&self) -> usize {
        HORIZON
    }

    fn reset(&mut self, seed: u64) -> EnvState {
        self.rng = rng_from(&[seed]);
        self.pos = (0, 0);
        self.steps = 0;
        self.done = false;
        self.state()
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action >= 4 {
            return Err(EnvError::InvalidAction { action, n_actions: 4 });
        }
        // two draws per step regardless of outcome keeps streams aligned across physics
        let u_slip: f64 = self.rng.gen();
        let u_dir: f64 = self.rng.gen();
        let (dx, dy) = delta(self.realized_move(action, u_slip, u_dir));
        self.pos = ((self.pos.0 + dx).clamp(0, WIDTH - 1), (self.pos.1 + dy).clamp(0, HEIGHT - 1));
        self.steps += 1;

        let mut reward = self.physics.step_cost;
        let terminal = if self.pos == GOAL {
            reward += 1.0;
            true
        } else if is_pit(self.pos) {
            reward -= 1.0;
            true
        } else {
            false
        };
        self.done = terminal || self.steps >= HORIZON;
        Ok(StepOutcome { next_state: self.state(), reward, done: self.done, terminal })
    }

    fn featurize(&self, obs: &[f64], out: &mut Vec<usize>) {
        out.clear();
        let x = (obs[0] as i32).clamp(0, WIDTH - 1);
        let y = (obs[1] as i32).clamp(0, HEIGHT - 1);
        out.push((y * WIDTH + x) as usize);
    }

    fn physics(&self) -> PhysicsParams {
        PhysicsParams::GridSlip(self.physics)
    }

    fn with_physics(&self, physics: &PhysicsParams) -> Result<Self, EnvError> {
        match physics {
            PhysicsParams::GridSlip(p) => GridSlip::new(self.variant, *p),
            _ => Err(EnvError::TaskMismatch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(slip: f64) -> GridSlip {
        GridSlip::new(Variant::M, GridSlipPhysics { slip_prob: slip, wind_bias: 0.0, step_cost: -0.01 }).unwrap()
    }

    #[test]
    fn fixed_start_cell() {
        let mut e = env(0.3);
        for seed in 0..20 {
            assert_eq!(e.reset(seed).obs, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn no_slip_is_deterministic_path() {
        let mut e = env(0.0);
        e.reset(3);
        for a in [0, 1, 1, 1, 1, 1] {
            e.step(a).unwrap();
        }
        assert_eq!(e.position(), (5, 1));
        let out = e.step(2).unwrap();
        assert!(out.done && out.terminal);
        assert!((out.reward - 0.99).abs() < 1e-12);
        assert_eq!(e.step(0), Err(EnvError::StepAfterDone));
    }

    #[test]
    fn pit_ends_episode() {
        let mut e = env(0.0);
        e.reset(0);
        let out = e.step(1).unwrap();
        assert!(out.terminal);
        assert!((out.reward + 1.01).abs() < 1e-12);
    }

    #[test]
    fn horizon_truncates() {
        let mut e = env(0.0);
        e.reset(0);
        let mut last = None;
        for _ in 0..HORIZON {
            last = Some(e.step(3).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done && !last.terminal);
        assert_eq!(last.next_state.step, HORIZON);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let mut a = env(0.5);
        let mut b = env(0.5);
        a.reset(11);
        b.reset(11);
        for t in 0..50 {
            let (oa, ob) = (a.step(t % 4), b.step(t % 4));
            assert_eq!(oa, ob);
            if oa.map(|o| o.done).unwrap_or(true) {
                break;
            }
        }
    }

    #[test]
    fn full_wind_slips_toward_pits() {
        let e = GridSlip::new(Variant::P, GridSlipPhysics { slip_prob: 1.0, wind_bias: 1.0, step_cost: 0.0 }).unwrap();
        for u in [0.0, 0.3, 0.99] {
            assert_eq!(e.realized_move(1, 0.2, u), 2);
        }
    }

    #[test]
    fn invalid_action() {
        let mut e = env(0.0);
        e.reset(0);
        assert!(matches!(e.step(4), Err(EnvError::InvalidAction { .. })));
    }
}
