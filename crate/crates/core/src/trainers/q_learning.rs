//! Off-policy learners with experience replay and soft target tables.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{sample_index, softmax_in_place, Learner, Policy, PolicyKind, Transition};

pub const BATCH_SIZE: usize = 32;
pub const LEARNING_STARTS: usize = 100;
/// ε of the ε-greedy exploration used by [`ReplayQ`].
pub const EXPLORATION_EPS: f64 = 0.1;
/// Replay capacity of [`SoftQ`], which has no buffer slot of its own.
pub const SOFT_Q_CAPACITY: usize = 100_000;

/// Fixed-capacity ring buffer with uniform sampling.
pub(crate) struct Replay {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl Replay {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: Vec::new(), next: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn sample<'a>(&'a self, rng: &mut ChaCha8Rng) -> &'a Transition {
        &self.items[rng.gen_range(0..self.items.len())]
    }
}

/// θ' ← τθ + (1 − τ)θ'
fn soft_update(target: &mut [f64], online: &[f64], tau: f64) {
    let keep = 1.0 - tau;
    for (t, &o) in target.iter_mut().zip(online) {
        *t = tau * o + keep * *t;
    }
}

/// `α log Σ_a exp(Q(s, a) / α)`, computed stably.
fn soft_value(q: &Policy, feats: &[usize], alpha: f64, scratch: &mut Vec<f64>) -> f64 {
    q.preferences(feats, scratch);
    let max = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scratch.iter().map(|v| ((v - max) / alpha).exp()).sum();
    max + alpha * sum.ln()
}

fn td_step(q: &mut Policy, feats: &[usize], action: usize, step: f64) {
    let nf = q.n_features;
    let row = &mut q.weights[action * nf..(action + 1) * nf];
    for &f in feats {
        row[f] += step;
    }
}

/// Deterministic greedy Q-learning from replay with an ε-greedy behaviour
/// policy; bootstrap targets come from a soft-updated target table.
pub struct ReplayQ {
    pub(crate) online: Policy,
    pub(crate) target: Policy,
    replay: Replay,
    learning_rate: f64,
    gamma: f64,
    tau: f64,
    pub(crate) updates: u64,
}

impl ReplayQ {
    pub fn new(n_actions: usize, n_features: usize, learning_rate: f64, gamma: f64, tau: f64, buffer_size: usize) -> Self {
        let online = Policy::zeros(PolicyKind::GreedyQ, n_actions, n_features, 1.0);
        Self { target: online.clone(), online, replay: Replay::new(buffer_size), learning_rate, gamma, tau, updates: 0 }
    }

    pub(crate) fn learn(&mut self, rng: &mut ChaCha8Rng) {
        if self.replay.len() < LEARNING_STARTS.min(self.replay.capacity) {
            return;
        }
        for _ in 0..BATCH_SIZE {
            let t = self.replay.sample(rng);
            let bootstrap = if t.terminal {
                0.0
            } else {
                let a_next = self.target.mode_action(&t.next_feats);
                self.target.preference(a_next, &t.next_feats)
            };
            let td = t.reward + self.gamma * bootstrap - self.online.preference(t.action, &t.feats);
            td_step(&mut self.online, &t.feats, t.action, self.learning_rate * td);
        }
        soft_update(&mut self.target.weights, &self.online.weights, self.tau);
        self.updates += 1;
    }
}

impl Learner for ReplayQ {
    fn policy(&self) -> &Policy {
        &self.online
    }

    fn act(&mut self, feats: &[usize], rng: &mut ChaCha8Rng) -> usize {
        if rng.gen::<f64>() < EXPLORATION_EPS {
            rng.gen_range(0..self.online.n_actions)
        } else {
            self.online.mode_action(feats)
        }
    }

    fn observe(&mut self, t: Transition, rng: &mut ChaCha8Rng) {
        self.replay.push(t);
        self.learn(rng);
    }

    fn parameters_finite(&self) -> bool {
        self.online.is_finite() && self.target.is_finite()
    }

    fn into_policy(self) -> Policy {
        self.online
    }
}

/// Entropy-regularized Q-learning. The behaviour policy is Boltzmann over Q
/// with temperature `ent_coef`, and targets use the soft state value
/// `α log Σ_a exp(Q'(s, a) / α)`.
pub struct SoftQ {
    online: Policy,
    target: Policy,
    replay: Replay,
    learning_rate: f64,
    gamma: f64,
    tau: f64,
    ent_coef: f64,
    scratch: Vec<f64>,
}

impl SoftQ {
    pub fn new(n_actions: usize, n_features: usize, learning_rate: f64, gamma: f64, tau: f64, ent_coef: f64) -> Self {
        let online = Policy::zeros(PolicyKind::BoltzmannQ, n_actions, n_features, ent_coef);
        Self {
            target: online.clone(),
            online,
            replay: Replay::new(SOFT_Q_CAPACITY),
            learning_rate,
            gamma,
            tau,
            ent_coef,
            scratch: Vec::with_capacity(n_actions),
        }
    }

    #[cfg(test)]
    fn soft_value(&mut self, feats: &[usize]) -> f64 {
        soft_value(&self.target, feats, self.ent_coef, &mut self.scratch)
    }

    fn learn(&mut self, rng: &mut ChaCha8Rng) {
        if self.replay.len() < LEARNING_STARTS {
            return;
        }
        for _ in 0..BATCH_SIZE {
            let t = self.replay.sample(rng);
            let bootstrap =
                if t.terminal { 0.0 } else { soft_value(&self.target, &t.next_feats, self.ent_coef, &mut self.scratch) };
            let td = t.reward + self.gamma * bootstrap - self.online.preference(t.action, &t.feats);
            td_step(&mut self.online, &t.feats, t.action, self.learning_rate * td);
        }
        soft_update(&mut self.target.weights, &self.online.weights, self.tau);
    }
}

impl Learner for SoftQ {
    fn policy(&self) -> &Policy {
        &self.online
    }

    fn act(&mut self, feats: &[usize], rng: &mut ChaCha8Rng) -> usize {
        self.online.preferences(feats, &mut self.scratch);
        let alpha = self.ent_coef;
        self.scratch.iter_mut().for_each(|q| *q /= alpha);
        softmax_in_place(&mut self.scratch);
        sample_index(&self.scratch, rng)
    }

    fn observe(&mut self, t: Transition, rng: &mut ChaCha8Rng) {
        self.replay.push(t);
        self.learn(rng);
    }

    fn parameters_finite(&self) -> bool {
        self.online.is_finite() && self.target.is_finite()
    }

    fn into_policy(self) -> Policy {
        self.online
    }
}
