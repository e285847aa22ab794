//! Miniature tasks with two physics-engine variants each.
//!
//! Every task exposes the same observation and action interface under both
//! variants, so a policy trained on `M` runs unmodified on `P` and vice versa.

mod fixtures;
mod grid_slip;
mod pendulum;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fixtures::{AnalyticFixture, ChainFixture};
pub use grid_slip::{GridSlip, GridSlipPhysics};
pub use pendulum::{FrictionMode, Integrator, PendulumLite, PendulumPhysics};

pub const DEFAULT_PRESETS_TOML: &str = include_str!("../../data/physics_presets.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid physics field `{field}`: {message}")]
    InvalidPhysics { field: String, message: String },
    #[error("physics parameters belong to different tasks")]
    TaskMismatch,
    #[error("action {action} out of range (task has {n_actions} actions)")]
    InvalidAction { action: usize, n_actions: usize },
    #[error("step called after the episode finished")]
    StepAfterDone,
    #[error("malformed presets: {0}")]
    Presets(String),
}

pub(crate) fn bad_field(field: &str, message: impl Into<String>) -> EnvError {
    EnvError::InvalidPhysics { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    GridSlip,
    PendulumLite,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::GridSlip, Task::PendulumLite];

    pub fn code(self) -> u64 {
        match self {
            Task::GridSlip => 0,
            Task::PendulumLite => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::GridSlip => "GridSlip",
            Task::PendulumLite => "PendulumLite",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gridslip" | "grid_slip" | "grid" => Ok(Task::GridSlip),
            "pendulumlite" | "pendulum_lite" | "pendulum" => Ok(Task::PendulumLite),
            _ => Err(format!("unknown task `{s}` (expected GridSlip or PendulumLite)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    M,
    P,
}

impl Variant {
    pub fn other(self) -> Variant {
        match self {
            Variant::M => Variant::P,
            Variant::P => Variant::M,
        }
    }
}

/// Transfer direction: train on the source variant, evaluate on both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "M->P")]
    MToP,
    #[serde(rename = "P->M")]
    PToM,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::MToP, Direction::PToM];

    pub fn source(self) -> Variant {
        match self {
            Direction::MToP => Variant::M,
            Direction::PToM => Variant::P,
        }
    }

    pub fn target(self) -> Variant {
        self.source().other()
    }

    pub fn code(self) -> u64 {
        match self {
            Direction::MToP => 0,
            Direction::PToM => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::MToP => "M->P",
            Direction::PToM => "P->M",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace(['-', '>', '_', ' ', '2'], "").as_str() {
            "MP" => Ok(Direction::MToP),
            "PM" => Ok(Direction::PToM),
            _ => Err(format!("unknown direction `{s}` (expected M->P or P->M)")),
        }
    }
}

/// ω: the dynamics parameters of one environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhysicsParams {
    GridSlip(GridSlipPhysics),
    PendulumLite(PendulumPhysics),
    /// Plain parameter vector used by test fixtures.
    Linear(Vec<f64>),
}

impl PhysicsParams {
    pub fn task(&self) -> Option<Task> {
        match self {
            PhysicsParams::GridSlip(_) => Some(Task::GridSlip),
            PhysicsParams::PendulumLite(_) => Some(Task::PendulumLite),
            PhysicsParams::Linear(_) => None,
        }
    }

    pub fn field_names(&self) -> Vec<String> {
        match self {
            PhysicsParams::GridSlip(_) => GridSlipPhysics::FIELDS.iter().map(|s| s.to_string()).collect(),
            PhysicsParams::PendulumLite(_) => PendulumPhysics::FIELDS.iter().map(|s| s.to_string()).collect(),
            PhysicsParams::Linear(w) => (0..w.len()).map(|i| format!("w{i}")).collect(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            PhysicsParams::GridSlip(p) => vec![p.slip_prob, p.wind_bias, p.step_cost],
            PhysicsParams::PendulumLite(p) => {
                vec![p.gravity, p.damping_coeff, p.mass, p.dt, p.friction_mode.code() as f64]
            }
            PhysicsParams::Linear(w) => w.clone(),
        }
    }

    /// Fields that take discrete values and are skipped by finite differences.
    pub fn is_discrete(&self, k: usize) -> bool {
        matches!(self, PhysicsParams::PendulumLite(_) if k == 4)
    }

    /// Replaces field `k` without validating.
    pub fn with_value(&self, k: usize, v: f64) -> PhysicsParams {
        match self {
            PhysicsParams::GridSlip(p) => {
                let mut p = *p;
                match k {
                    0 => p.slip_prob = v,
                    1 => p.wind_bias = v,
                    2 => p.step_cost = v,
                    _ => panic!("GridSlip has 3 physics fields"),
                }
                PhysicsParams::GridSlip(p)
            }
            PhysicsParams::PendulumLite(p) => {
                let mut p = *p;
                match k {
                    0 => p.gravity = v,
                    1 => p.damping_coeff = v,
                    2 => p.mass = v,
                    3 => p.dt = v,
                    4 => p.friction_mode = FrictionMode::from_code(v.round() as i64).unwrap_or(p.friction_mode),
                    _ => panic!("PendulumLite has 5 physics fields"),
                }
                PhysicsParams::PendulumLite(p)
            }
            PhysicsParams::Linear(w) => {
                let mut w = w.clone();
                w[k] = v;
                PhysicsParams::Linear(w)
            }
        }
    }

    /// Nearest admissible value for field `k`.
    pub fn clamp_value(&self, k: usize, v: f64) -> f64 {
        match self {
            PhysicsParams::GridSlip(_) => match k {
                0 => v.clamp(0.0, 1.0),
                1 => v.clamp(-1.0, 1.0),
                _ => v.clamp(-grid_slip::MAX_STEP_COST, grid_slip::MAX_STEP_COST),
            },
            PhysicsParams::PendulumLite(_) => match k {
                0 | 2 | 3 => v.max(f64::MIN_POSITIVE),
                1 => v.max(0.0),
                _ => v,
            },
            PhysicsParams::Linear(_) => v,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            PhysicsParams::GridSlip(p) => p.validate(),
            PhysicsParams::PendulumLite(p) => p.validate(),
            PhysicsParams::Linear(w) => {
                if w.iter().all(|x| x.is_finite()) {
                    Ok(())
                } else {
                    Err(bad_field("w", "must be finite"))
                }
            }
        }
    }

    /// Per-field normalization scales: the magnitude of the bundled `M` preset
    /// field, or 1 where that magnitude is zero. Fixture vectors use unit scales.
    pub fn normalization_scales(&self) -> Vec<f64> {
        let reference = match self {
            PhysicsParams::Linear(w) => return vec![1.0; w.len()],
            _ => PhysicsPresets::bundled().get(self.task().expect("task physics"), Variant::M).values(),
        };
        reference.iter().map(|v| if v.abs() > 0.0 { v.abs() } else { 1.0 }).collect()
    }
}

/// ‖ω_S − ω_T‖ over per-field normalized differences.
///
/// Continuous fields are divided by [`PhysicsParams::normalization_scales`];
/// the discrete friction mode contributes its raw difference.
pub fn physics_distance(a: &PhysicsParams, b: &PhysicsParams) -> Result<f64, EnvError> {
    let same = match (a, b) {
        (PhysicsParams::Linear(x), PhysicsParams::Linear(y)) => x.len() == y.len(),
        _ => a.task().is_some() && a.task() == b.task(),
    };
    if !same {
        return Err(EnvError::TaskMismatch);
    }
    let scales = a.normalization_scales();
    let (va, vb) = (a.values(), b.values());
    let sq: f64 = (0..va.len())
        .map(|k| {
            let d = if a.is_discrete(k) { va[k] - vb[k] } else { (va[k] - vb[k]) / scales[k] };
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantPair<T> {
    #[serde(rename = "M")]
    pub m: T,
    #[serde(rename = "P")]
    pub p: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsPresets {
    #[serde(rename = "GridSlip")]
    pub grid_slip: VariantPair<GridSlipPhysics>,
    #[serde(rename = "PendulumLite")]
    pub pendulum_lite: VariantPair<PendulumPhysics>,
}

impl PhysicsPresets {
    pub fn bundled() -> Self {
        Self::from_toml_str(DEFAULT_PRESETS_TOML).expect("bundled presets are valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, EnvError> {
        let presets: PhysicsPresets = toml::from_str(text).map_err(|e| EnvError::Presets(e.to_string()))?;
        for task in Task::ALL {
            for v in [Variant::M, Variant::P] {
                presets.get(task, v).validate()?;
            }
            if presets.get(task, Variant::M) == presets.get(task, Variant::P) {
                return Err(EnvError::Presets(format!("{task}: M and P presets must differ")));
            }
        }
        Ok(presets)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnvError::Presets(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("presets serialize")
    }

    pub fn get(&self, task: Task, variant: Variant) -> PhysicsParams {
        match (task, variant) {
            (Task::GridSlip, Variant::M) => PhysicsParams::GridSlip(self.grid_slip.m),
            (Task::GridSlip, Variant::P) => PhysicsParams::GridSlip(self.grid_slip.p),
            (Task::PendulumLite, Variant::M) => PhysicsParams::PendulumLite(self.pendulum_lite.m),
            (Task::PendulumLite, Variant::P) => PhysicsParams::PendulumLite(self.pendulum_lite.p),
        }
    }

    pub fn distance(&self, task: Task) -> f64 {
        physics_distance(&self.get(task, Variant::M), &self.get(task, Variant::P)).expect("same task")
    }
}

/// Observation, done flag and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub obs: Vec<f64>,
    pub done: bool,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
    /// True when the episode ended in a terminal state rather than by the horizon.
    pub terminal: bool,
}

/// Common interface of every environment, including test fixtures.
pub trait Env {
    fn n_actions(&self) -> usize;
    fn n_features(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&mut self, seed: u64) -> EnvState;
    fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError>;
    /// Active binary feature indices for an observation.
    fn featurize(&self, obs: &[f64], out: &mut Vec<usize>);
    fn physics(&self) -> PhysicsParams;
    /// A fresh environment of the same kind with different physics.
    fn with_physics(&self, physics: &PhysicsParams) -> Result<Self, EnvError>
    where
        Self: Sized;
}

/// Either bundled task, as built by [`make_env`].
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum EnvHandle {
    GridSlip(GridSlip),
    PendulumLite(PendulumLite),
}

macro_rules! delegate {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            EnvHandle::GridSlip($e) => $body,
            EnvHandle::PendulumLite($e) => $body,
        }
    };
}

impl EnvHandle {
    pub fn task(&self) -> Task {
        match self {
            EnvHandle::GridSlip(_) => Task::GridSlip,
            EnvHandle::PendulumLite(_) => Task::PendulumLite,
        }
    }

    pub fn variant(&self) -> Variant {
        delegate!(self, e => e.variant())
    }
}

impl Env for EnvHandle {
    fn n_actions(&self) -> usize {
        delegate!(self, e => e.n_actions())
    }
    fn n_features(&self) -> usize {
        delegate!(self, e => e.n_features())
    }
    fn horizon(&self) -> usize {
        delegate!(self, e => e.horizon())
    }
    fn reset(&mut self, seed: u64) -> EnvState {
        delegate!(self, e => e.reset(seed))
    }
    fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        delegate!(self, e => e.step(action))
    }
    fn featurize(&self, obs: &[f64], out: &mut Vec<usize>) {
        delegate!(self, e => e.featurize(obs, out))
    }
    fn physics(&self) -> PhysicsParams {
        delegate!(self, e => e.physics())
    }
    fn with_physics(&self, physics: &PhysicsParams) -> Result<Self, EnvError> {
        Ok(match self {
            EnvHandle::GridSlip(e) => EnvHandle::GridSlip(e.with_physics(physics)?),
            EnvHandle::PendulumLite(e) => EnvHandle::PendulumLite(e.with_physics(physics)?),
        })
    }
}

/// Builds a task environment from the variant preset, replacing the physics
/// wholesale when `override_physics` is given.
pub fn make_env(
    task: Task,
    variant: Variant,
    presets: &PhysicsPresets,
    override_physics: Option<&PhysicsParams>,
) -> Result<EnvHandle, EnvError> {
    let physics = match override_physics {
        Some(p) if p.task() != Some(task) => return Err(EnvError::TaskMismatch),
        Some(p) => p.clone(),
        None => presets.get(task, variant),
    };
    physics.validate()?;
    Ok(match physics {
        PhysicsParams::GridSlip(p) => EnvHandle::GridSlip(GridSlip::new(variant, p)?),
        PhysicsParams::PendulumLite(p) => EnvHandle::PendulumLite(PendulumLite::new(variant, p)?),
        PhysicsParams::Linear(_) => unreachable!("checked task above"),
    })
}
