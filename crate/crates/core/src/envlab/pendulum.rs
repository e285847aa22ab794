//! Torque-limited pendulum swing-up.
//!
//! The angle `θ ∈ [0, 2π)` is measured from upright, so the pendulum hangs at
//! `θ = π`. With a unit-length rod,
//!
//! ```text
//! θ'' = (τ + m g sin θ + friction(θ')) / m
//! ```
//!
//! where friction is `-b θ'` (viscous) or `-b sign(θ')` (coulomb). Variant `M`
//! integrates with semi-implicit Euler, variant `P` with explicit Euler.
//! Angular velocity is clipped to `±8` rad/s.
//!
//! Reward per step: `-(err² + 0.1 θ'² + 0.001 τ²)` with `err` the signed
//! distance from upright, evaluated before the step.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{bad_field, Env, EnvError, EnvState, PhysicsParams, StepOutcome, Variant};
use crate::seed::rng_from;

pub const HORIZON: usize = 400;
pub const TORQUES: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];
pub const MAX_SPEED: f64 = 8.0;

const N_TILINGS: usize = 8;
const TILES_PER_DIM: usize = 8;
const TILING_SIZE: usize = (TILES_PER_DIM + 1) * (TILES_PER_DIM + 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum FrictionMode {
    Viscous,
    Coulomb,
}

impl FrictionMode {
    pub fn code(self) -> i64 {
        match self {
            FrictionMode::Viscous => 0,
            FrictionMode::Coulomb => 1,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(FrictionMode::Viscous),
            1 => Some(FrictionMode::Coulomb),
            _ => None,
        }
    }
}

impl TryFrom<i64> for FrictionMode {
    type Error = String;
    fn try_from(v: i64) -> Result<Self, Self::Error> {
        FrictionMode::from_code(v).ok_or_else(|| format!("friction_mode must be 0 or 1, got {v}"))
    }
}

impl From<FrictionMode> for i64 {
    fn from(m: FrictionMode) -> i64 {
        m.code()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumPhysics {
    pub gravity: f64,
    pub damping_coeff: f64,
    pub mass: f64,
    pub dt: f64,
    pub friction_mode: FrictionMode,
}

impl PendulumPhysics {
    pub const FIELDS: [&'static str; 5] = ["gravity", "damping_coeff", "mass", "dt", "friction_mode"];

    pub fn validate(&self) -> Result<(), EnvError> {
        for (name, v) in [("gravity", self.gravity), ("mass", self.mass), ("dt", self.dt)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad_field(name, format!("{v} must be positive")));
            }
        }
        if !(self.damping_coeff.is_finite() && self.damping_coeff >= 0.0) {
            return Err(bad_field("damping_coeff", format!("{} must be >= 0", self.damping_coeff)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    SemiImplicitEuler,
    ExplicitEuler,
}

impl Integrator {
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::M => Integrator::SemiImplicitEuler,
            Variant::P => Integrator::ExplicitEuler,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PendulumLite {
    variant: Variant,
    integrator: Integrator,
    physics: PendulumPhysics,
    theta: f64,
    omega: f64,
    steps: usize,
    done: bool,
}

/// Signed angular distance from upright, in `(-π, π]`.
pub fn angle_error(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t > PI {
        t - TAU
    } else {
        t
    }
}

impl PendulumLite {
    pub fn new(variant: Variant, physics: PendulumPhysics) -> Result<Self, EnvError> {
        physics.validate()?;
        Ok(Self { variant, integrator: Integrator::for_variant(variant), physics, theta: PI, omega: 0.0, steps: 0, done: false })
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Mechanical energy relative to the hanging rest state.
    pub fn energy(&self) -> f64 {
        let p = &self.physics;
        0.5 * p.mass * self.omega * self.omega + p.mass * p.gravity * (1.0 + self.theta.cos())
    }

    pub fn set_state(&mut self, theta: f64, omega: f64) {
        self.theta = theta.rem_euclid(TAU);
        self.omega = omega;
    }

    fn state(&self) -> EnvState {
        EnvState { obs: vec![self.theta, self.omega], done: self.done, step: self.steps }
    }

    fn acceleration(&self, theta: f64, omega: f64, torque: f64) -> f64 {
        let p = &self.physics;
        let friction = match p.friction_mode {
            FrictionMode::Viscous => -p.damping_coeff * omega,
            FrictionMode::Coulomb if omega != 0.0 => -p.damping_coeff * omega.signum(),
            FrictionMode::Coulomb => 0.0,
        };
        (torque + p.mass * p.gravity * theta.sin() + friction) / p.mass
    }
}

impl Env for PendulumLite {
    fn n_actions(&self) -> usize {
        TORQUES.len()
    }

    fn n_features(&self) -> usize {
        N_TILINGS * TILING_SIZE
    }

    fn horizon(&self) -> usize {
        HORIZON
    }

    fn reset(&mut self, seed: u64) -> EnvState {
        let mut rng = rng_from(&[seed]);
        self.theta = PI + rng.gen_range(-0.1..=0.1);
        self.omega = 0.0;
        self.steps = 0;
        self.done = false;
        self.state()
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        let torque = *TORQUES.get(action).ok_or(EnvError::InvalidAction { action, n_actions: TORQUES.len() })?;
        let err = angle_error(self.theta);
        let reward = -(err * err + 0.1 * self.omega * self.omega + 0.001 * torque * torque);

        let dt = self.physics.dt;
        let acc = self.acceleration(self.theta, self.omega, torque);
        let new_omega = (self.omega + dt * acc).clamp(-MAX_SPEED, MAX_SPEED);
        let new_theta = match self.integrator {
            Integrator::SemiImplicitEuler => self.theta + dt * new_omega,
            Integrator::ExplicitEuler => self.theta + dt * self.omega,
        };
        self.theta = new_theta.rem_euclid(TAU);
        self.omega = new_omega;
        self.steps += 1;
        self.done = self.steps >= HORIZON;
        Ok(StepOutcome { next_state: self.state(), reward, done: self.done, terminal: false })
    }

    fn featurize(&self, obs: &[f64], out: &mut Vec<usize>) {
        out.clear();
        let x = (obs[0].rem_euclid(TAU) / TAU) * TILES_PER_DIM as f64;
        let y = ((obs[1].clamp(-MAX_SPEED, MAX_SPEED) + MAX_SPEED) / (2.0 * MAX_SPEED)) * TILES_PER_DIM as f64;
        for t in 0..N_TILINGS {
            // asymmetric offsets (1, 3) per tiling
            let ox = t as f64 / N_TILINGS as f64;
            let oy = (3 * t % N_TILINGS) as f64 / N_TILINGS as f64;
            let ix = ((x + ox) as usize).min(TILES_PER_DIM);
            let iy = ((y + oy) as usize).min(TILES_PER_DIM);
            out.push(t * TILING_SIZE + iy * (TILES_PER_DIM + 1) + ix);
        }
    }

    fn physics(&self) -> PhysicsParams {
        PhysicsParams::PendulumLite(self.physics)
    }

    fn with_physics(&self, physics: &PhysicsParams) -> Result<Self, EnvError> {
        match physics {
            PhysicsParams::PendulumLite(p) => Ok(PendulumLite::new(self.variant, *p)?.with_integrator(self.integrator)),
            _ => Err(EnvError::TaskMismatch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envlab::PhysicsPresets;

    fn preset(variant: Variant) -> PendulumLite {
        let presets = PhysicsPresets::bundled();
        let p = match variant {
            Variant::M => presets.pendulum_lite.m,
            Variant::P => presets.pendulum_lite.p,
        };
        PendulumLite::new(variant, p).unwrap()
    }

    #[test]
    fn reset_angle_near_hanging() {
        let mut e = preset(Variant::M);
        for seed in 0..500 {
            let s = e.reset(seed);
            assert!(s.obs[0] >= PI - 0.1 && s.obs[0] <= PI + 0.1, "{}", s.obs[0]);
            assert_eq!(s.obs, e.reset(seed).obs);
        }
    }

    #[test]
    fn viscous_energy_non_increasing_without_torque() {
        for seed in 0..10 {
            let mut e = preset(Variant::M);
            e.reset(seed);
            let e0 = e.energy();
            let mut prev = e0;
            for _ in 0..HORIZON {
                e.step(2).unwrap();
                let now = e.energy();
                assert!(now <= prev + 1e-6 * e0, "energy rose {prev} -> {now}");
                prev = now;
            }
            assert!(prev < e0);
        }
    }

    #[test]
    fn reward_bounded() {
        let mut e = preset(Variant::P);
        e.set_state(0.0, 0.0);
        for (theta, omega) in [(PI, MAX_SPEED), (PI - 1e-9, -MAX_SPEED), (0.0, 0.0)] {
            e.set_state(theta, omega);
            let r = e.step(0).unwrap().reward;
            assert!(r.abs() <= 50.0);
        }
    }

    #[test]
    fn angle_error_wraps() {
        assert_eq!(angle_error(0.0), 0.0);
        assert!((angle_error(TAU - 0.1) + 0.1).abs() < 1e-12);
        assert!((angle_error(PI).abs() - PI).abs() < 1e-12);
    }

    #[test]
    fn tile_features_in_range_and_distinct_tilings() {
        let e = preset(Variant::M);
        let mut out = Vec::new();
        for &(t, w) in &[(0.0, -8.0), (TAU - 1e-9, 8.0), (PI, 0.3)] {
            e.featurize(&[t, w], &mut out);
            assert_eq!(out.len(), N_TILINGS);
            for (k, &f) in out.iter().enumerate() {
                assert!(f < e.n_features());
                assert_eq!(f / TILING_SIZE, k);
            }
        }
    }

    #[test]
    fn variants_share_interface() {
        let (m, p) = (preset(Variant::M), preset(Variant::P));
        assert_eq!(m.n_actions(), p.n_actions());
        assert_eq!(m.n_features(), p.n_features());
    }
}
