//! Four lightweight learning algorithms over sparse binary features.
//!
//! | code | analog | slots (hp1..hp4) |
//! |------|--------|------------------|
//! | 0 | clipped policy gradient | learning_rate, gamma, clip_range, n_steps |
//! | 1 | advantage actor-critic with GAE | learning_rate, gamma, gae_lambda, vf_coef |
//! | 2 | deterministic replay Q-learning, soft targets | learning_rate, gamma, tau, buffer_size |
//! | 3 | soft (entropy-regularized) Q-learning | learning_rate, gamma, tau, ent_coef |
//!
//! All randomness flows from the `seed` passed to [`train`]; the same
//! configuration, seed, budget and physics give bit-identical parameters.

mod policy_gradient;
mod q_learning;

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config_space::Configuration;
use crate::envlab::{Env, EnvError};
use crate::seed::{derive_seed, rng_from};

pub use policy_gradient::{ActorCritic, ClippedPolicyGradient};
pub use q_learning::{ReplayQ, SoftQ};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration is for algorithm {config} but {requested} was requested")]
    AlgorithmMismatch { requested: u8, config: u8 },
    #[error("unknown algorithm code {0}")]
    UnknownAlgorithm(u8),
    #[error("policy has {policy} features/{policy_actions} actions, environment has {env}/{env_actions}")]
    Incompatible { policy: usize, policy_actions: usize, env: usize, env_actions: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    SoftmaxLinear,
    GreedyQ,
    BoltzmannQ,
}

/// A linear policy over binary features: `pref(a | s) = Σ_{f active} w[a][f]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    pub n_actions: usize,
    pub n_features: usize,
    /// Boltzmann temperature; 1 for softmax policies, unused for greedy ones.
    pub temperature: f64,
    /// Action-major table, `weights[a * n_features + f]`.
    pub weights: Vec<f64>,
}

impl Policy {
    pub fn zeros(kind: PolicyKind, n_actions: usize, n_features: usize, temperature: f64) -> Self {
        Self { kind, n_actions, n_features, temperature, weights: vec![0.0; n_actions * n_features] }
    }

    #[inline]
    pub fn preference(&self, action: usize, active: &[usize]) -> f64 {
        let row = &self.weights[action * self.n_features..(action + 1) * self.n_features];
        active.iter().map(|&f| row[f]).sum()
    }

    pub fn preferences(&self, active: &[usize], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.n_actions).map(|a| self.preference(a, active)));
    }

    /// Highest-preference action; ties go to the lowest index.
    pub fn mode_action(&self, active: &[usize]) -> usize {
        let mut best = 0;
        let mut best_v = self.preference(0, active);
        for a in 1..self.n_actions {
            let v = self.preference(a, active);
            if v > best_v {
                best = a;
                best_v = v;
            }
        }
        best
    }

    /// Action distribution; a point mass on the mode for greedy policies.
    pub fn probabilities(&self, active: &[usize]) -> Vec<f64> {
        let mut prefs = Vec::with_capacity(self.n_actions);
        self.preferences(active, &mut prefs);
        match self.kind {
            PolicyKind::GreedyQ => {
                let mode = self.mode_action(active);
                (0..self.n_actions).map(|a| if a == mode { 1.0 } else { 0.0 }).collect()
            }
            PolicyKind::SoftmaxLinear | PolicyKind::BoltzmannQ => {
                let t = if self.kind == PolicyKind::BoltzmannQ { self.temperature } else { 1.0 };
                for p in prefs.iter_mut() {
                    *p /= t;
                }
                softmax_in_place(&mut prefs);
                prefs
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub total_env_steps: u64,
    pub eval_episodes: usize,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self { total_env_steps: 20_000, eval_episodes: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub policy: Policy,
    /// `(env step, mean return of episodes finished since the previous point)`.
    pub train_return_curve: Vec<(u64, f64)>,
    pub wall_time: f64,
    pub diverged: bool,
    pub env_steps: u64,
}

/// One environment transition in feature space.
#[derive(Debug, Clone)]
pub(crate) struct Transition {
    pub feats: Vec<usize>,
    pub action: usize,
    pub reward: f64,
    pub next_feats: Vec<usize>,
    /// Episode ended in a terminal state (no bootstrapping).
    pub terminal: bool,
    /// Episode ended for any reason.
    pub done: bool,
}

/// Drives an environment across episode boundaries and tracks the budget.
pub(crate) struct Interaction<'a, E: Env> {
    env: &'a mut E,
    seed: u64,
    episode: u64,
    feats: Vec<usize>,
    pub steps: u64,
    pub budget: u64,
    ep_return: f64,
    window_returns: Vec<f64>,
    curve: Vec<(u64, f64)>,
    curve_every: u64,
}

impl<'a, E: Env> Interaction<'a, E> {
    pub fn new(env: &'a mut E, seed: u64, budget: u64) -> Self {
        let first = env.reset(derive_seed(&[seed, 0xE9, 0]));
        let mut feats = Vec::new();
        env.featurize(&first.obs, &mut feats);
        Self {
            env,
            seed,
            episode: 0,
            feats,
            steps: 0,
            budget,
            ep_return: 0.0,
            window_returns: Vec::new(),
            curve: Vec::new(),
            curve_every: (budget / 20).max(1),
        }
    }

    pub fn exhausted(&self) -> bool {
        self.steps >= self.budget
    }

    pub fn current(&self) -> &[usize] {
        &self.feats
    }

    pub fn step(&mut self, action: usize) -> Result<Transition, EnvError> {
        let out = self.env.step(action)?;
        let mut next = Vec::with_capacity(self.feats.len());
        self.env.featurize(&out.next_state.obs, &mut next);
        self.steps += 1;
        self.ep_return += out.reward;
        let t = Transition {
            feats: std::mem::take(&mut self.feats),
            action,
            reward: out.reward,
            next_feats: next.clone(),
            terminal: out.terminal,
            done: out.done,
        };
        if out.done {
            self.window_returns.push(self.ep_return);
            self.ep_return = 0.0;
            self.episode += 1;
            let s = self.env.reset(derive_seed(&[self.seed, 0xE9, self.episode]));
            self.env.featurize(&s.obs, &mut self.feats);
        } else {
            self.feats = next;
        }
        if (self.steps.is_multiple_of(self.curve_every) || self.steps == self.budget) && !self.window_returns.is_empty() {
            let mean = self.window_returns.iter().sum::<f64>() / self.window_returns.len() as f64;
            self.curve.push((self.steps, mean));
            self.window_returns.clear();
        }
        Ok(t)
    }

    pub fn into_curve(self) -> Vec<(u64, f64)> {
        self.curve
    }
}

/// Common shape of the four learners.
pub(crate) trait Learner {
    fn policy(&self) -> &Policy;
    fn act(&mut self, feats: &[usize], rng: &mut ChaCha8Rng) -> usize;
    /// Consumes one transition; may trigger an update.
    fn observe(&mut self, t: Transition, rng: &mut ChaCha8Rng);
    /// Called once when the budget is exhausted.
    fn finish(&mut self, _rng: &mut ChaCha8Rng) {}
    fn parameters_finite(&self) -> bool;
    fn into_policy(self) -> Policy;
}

type LearnerOutcome = (Policy, Vec<(u64, f64)>, bool, u64);

fn run_learner<E: Env, L: Learner>(
    mut learner: L,
    env: &mut E,
    seed: u64,
    budget: &TrainBudget,
) -> Result<LearnerOutcome, TrainError> {
    let mut rng = rng_from(&[seed, 0xAC7]);
    let mut inter = Interaction::new(env, seed, budget.total_env_steps);
    let mut diverged = false;
    while !inter.exhausted() {
        if diverged {
            // budget is still consumed so step counts stay exact
            let a = rng.gen_range(0..learner.policy().n_actions);
            inter.step(a)?;
            continue;
        }
        let a = learner.act(inter.current(), &mut rng);
        let t = inter.step(a)?;
        learner.observe(t, &mut rng);
        if inter.exhausted() {
            learner.finish(&mut rng);
        }
        if inter.steps.is_multiple_of(256) || inter.exhausted() {
            diverged = !learner.parameters_finite();
        }
    }
    let steps = inter.steps;
    let curve = inter.into_curve();
    let mut policy = learner.into_policy();
    if diverged || !policy.is_finite() {
        diverged = true;
        policy.weights.iter_mut().for_each(|w| *w = 0.0);
    }
    Ok((policy, curve, diverged, steps))
}

/// Trains the algorithm analog `algorithm_id` for exactly
/// `budget.total_env_steps` environment steps.
///
/// Numeric divergence is not an error: the returned policy is the all-zero
/// sentinel and `diverged` is set.
pub fn train<E: Env>(
    algorithm_id: u8,
    config: &Configuration,
    env: &mut E,
    seed: u64,
    budget: &TrainBudget,
) -> Result<TrainResult, TrainError> {
    if config.algorithm_id != algorithm_id {
        return Err(TrainError::AlgorithmMismatch { requested: algorithm_id, config: config.algorithm_id });
    }
    let start = Instant::now();
    let (na, nf) = (env.n_actions(), env.n_features());
    let v = config.values;
    let (policy, curve, diverged, steps) = match algorithm_id {
        0 => run_learner(ClippedPolicyGradient::new(na, nf, v[0], v[1], v[2], v[3] as usize), env, seed, budget)?,
        1 => run_learner(ActorCritic::new(na, nf, v[0], v[1], v[2], v[3]), env, seed, budget)?,
        2 => run_learner(ReplayQ::new(na, nf, v[0], v[1], v[2], v[3] as usize), env, seed, budget)?,
        3 => run_learner(SoftQ::new(na, nf, v[0], v[1], v[2], v[3]), env, seed, budget)?,
        other => return Err(TrainError::UnknownAlgorithm(other)),
    };
    if diverged {
        log::warn!("training diverged for {config} (seed {seed}); returning sentinel policy");
    }
    Ok(TrainResult { policy, train_return_curve: curve, wall_time: start.elapsed().as_secs_f64(), diverged, env_steps: steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Always take the highest-preference action.
    Mode,
    /// Sample from the policy's action distribution.
    Sample,
}

/// Mean undiscounted return over episodes seeded `eval_seed..eval_seed + episodes`,
/// acting by the policy's mode action.
pub fn evaluate<E: Env>(policy: &Policy, env: &mut E, episodes: usize, eval_seed: u64) -> Result<f64, TrainError> {
    evaluate_with(policy, env, episodes, eval_seed, EvalMode::Mode)
}

pub fn evaluate_with<E: Env>(
    policy: &Policy,
    env: &mut E,
    episodes: usize,
    eval_seed: u64,
    mode: EvalMode,
) -> Result<f64, TrainError> {
    if policy.n_features != env.n_features() || policy.n_actions != env.n_actions() {
        return Err(TrainError::Incompatible {
            policy: policy.n_features,
            policy_actions: policy.n_actions,
            env: env.n_features(),
            env_actions: env.n_actions(),
        });
    }
    let episodes = episodes.max(1);
    let mut feats = Vec::new();
    let mut total = 0.0;
    for e in 0..episodes as u64 {
        let seed = eval_seed.wrapping_add(e);
        let mut rng = rng_from(&[seed, 0xE7A1]);
        let mut state = env.reset(seed);
        let mut ret = 0.0;
        while !state.done {
            env.featurize(&state.obs, &mut feats);
            let a = match mode {
                EvalMode::Mode => policy.mode_action(&feats),
                EvalMode::Sample => sample_index(&policy.probabilities(&feats), &mut rng),
            };
            let out = env.step(a)?;
            ret += out.reward;
            state = out.next_state;
        }
        total += ret;
    }
    Ok(total / episodes as f64)
}
