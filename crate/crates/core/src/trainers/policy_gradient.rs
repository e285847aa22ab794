//! On-policy softmax actor with a linear critic.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{sample_index, softmax_in_place, Learner, Policy, PolicyKind, Transition};

/// Fixed GAE lambda used by the clipped variant.
const CLIP_GAE_LAMBDA: f64 = 0.95;
const CLIP_EPOCHS: usize = 4;
const CLIP_VF_COEF: f64 = 0.5;
/// Rollout length of the actor-critic variant.
const A2C_ROLLOUT: usize = 5;

struct Sample {
    feats: Vec<usize>,
    action: usize,
    reward: f64,
    value: f64,
    next_value: f64,
    done: bool,
    old_logp: f64,
}

/// Actor, critic and a rollout buffer shared by both on-policy learners.
struct OnPolicyCore {
    actor: Policy,
    critic: Vec<f64>,
    buffer: Vec<Sample>,
    probs: Vec<f64>,
}

impl OnPolicyCore {
    fn new(n_actions: usize, n_features: usize) -> Self {
        Self {
            actor: Policy::zeros(PolicyKind::SoftmaxLinear, n_actions, n_features, 1.0),
            critic: vec![0.0; n_features],
            buffer: Vec::new(),
            probs: Vec::with_capacity(n_actions),
        }
    }

    fn value(&self, feats: &[usize]) -> f64 {
        feats.iter().map(|&f| self.critic[f]).sum()
    }

    fn action_probs(&mut self, feats: &[usize]) {
        self.actor.preferences(feats, &mut self.probs);
        softmax_in_place(&mut self.probs);
    }

    fn push(&mut self, t: Transition) {
        self.action_probs(&t.feats);
        let old_logp = self.probs[t.action].ln();
        let value = self.value(&t.feats);
        let next_value = if t.terminal { 0.0 } else { self.value(&t.next_feats) };
        self.buffer.push(Sample {
            feats: t.feats,
            action: t.action,
            reward: t.reward,
            value,
            next_value,
            done: t.done,
            old_logp,
        });
    }

    /// Generalized advantage estimates and value targets for the buffer.
    fn advantages(&self, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.buffer.len();
        let mut adv = vec![0.0; n];
        let mut next_adv = 0.0;
        for i in (0..n).rev() {
            let s = &self.buffer[i];
            let delta = s.reward + gamma * s.next_value - s.value;
            let carry = if s.done { 0.0 } else { next_adv };
            adv[i] = delta + gamma * lambda * carry;
            next_adv = adv[i];
        }
        let returns = adv.iter().zip(&self.buffer).map(|(a, s)| a + s.value).collect();
        (adv, returns)
    }

    /// `w[b][f] += step * (1[b = a] - π(b|s))` for every active feature.
    fn actor_step(&mut self, feats: &[usize], action: usize, step: f64) {
        let nf = self.actor.n_features;
        for b in 0..self.actor.n_actions {
            let g = step * (if b == action { 1.0 } else { 0.0 } - self.probs[b]);
            let row = &mut self.actor.weights[b * nf..(b + 1) * nf];
            for &f in feats {
                row[f] += g;
            }
        }
    }

    fn critic_step(&mut self, feats: &[usize], step: f64) {
        for &f in feats {
            self.critic[f] += step;
        }
    }

    fn finite(&self) -> bool {
        self.actor.is_finite() && self.critic.iter().all(|w| w.is_finite())
    }
}

/// Clipped-surrogate policy gradient: rollouts of `n_steps`, advantage
/// normalization, several epochs of per-sample updates with the ratio clipped
/// to `[1 - clip_range, 1 + clip_range]`.
pub struct ClippedPolicyGradient {
    core: OnPolicyCore,
    learning_rate: f64,
    gamma: f64,
    clip_range: f64,
    n_steps: usize,
    pub(crate) clipped_updates: u64,
}

impl ClippedPolicyGradient {
    pub fn new(n_actions: usize, n_features: usize, learning_rate: f64, gamma: f64, clip_range: f64, n_steps: usize) -> Self {
        Self {
            core: OnPolicyCore::new(n_actions, n_features),
            learning_rate,
            gamma,
            clip_range,
            n_steps: n_steps.max(1),
            clipped_updates: 0,
        }
    }

    fn update(&mut self, rng: &mut ChaCha8Rng) {
        if self.core.buffer.is_empty() {
            return;
        }
        let (mut adv, returns) = self.core.advantages(self.gamma, CLIP_GAE_LAMBDA);
        if adv.len() > 1 {
            let mean = adv.iter().sum::<f64>() / adv.len() as f64;
            let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64;
            let sd = var.sqrt() + 1e-8;
            adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
        }
        let buffer = std::mem::take(&mut self.core.buffer);
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        for _ in 0..CLIP_EPOCHS {
            order.shuffle(rng);
            for &i in &order {
                let s = &buffer[i];
                self.core.action_probs(&s.feats);
                let ratio = (self.core.probs[s.action].ln() - s.old_logp).exp();
                let a = adv[i];
                let clipped = (a > 0.0 && ratio > 1.0 + self.clip_range) || (a < 0.0 && ratio < 1.0 - self.clip_range);
                if clipped {
                    self.clipped_updates += 1;
                } else {
                    self.core.actor_step(&s.feats, s.action, self.learning_rate * ratio * a);
                }
                let v = self.core.value(&s.feats);
                self.core.critic_step(&s.feats, self.learning_rate * CLIP_VF_COEF * (returns[i] - v));
            }
        }
    }
}

impl Learner for ClippedPolicyGradient {
    fn policy(&self) -> &Policy {
        &self.core.actor
    }

    fn act(&mut self, feats: &[usize], rng: &mut ChaCha8Rng) -> usize {
        self.core.action_probs(feats);
        sample_index(&self.core.probs, rng)
    }

    fn observe(&mut self, t: Transition, rng: &mut ChaCha8Rng) {
        self.core.push(t);
        if self.core.buffer.len() >= self.n_steps {
            self.update(rng);
        }
    }

    fn finish(&mut self, rng: &mut ChaCha8Rng) {
        self.update(rng);
    }

    fn parameters_finite(&self) -> bool {
        self.core.finite()
    }

    fn into_policy(self) -> Policy {
        self.core.actor
    }
}

/// Synchronous advantage actor-critic: short rollouts, GAE with `gae_lambda`,
/// one update per rollout with the critic step scaled by `vf_coef`.
pub struct ActorCritic {
    core: OnPolicyCore,
    learning_rate: f64,
    gamma: f64,
    gae_lambda: f64,
    vf_coef: f64,
}

impl ActorCritic {
    pub fn new(n_actions: usize, n_features: usize, learning_rate: f64, gamma: f64, gae_lambda: f64, vf_coef: f64) -> Self {
        Self { core: OnPolicyCore::new(n_actions, n_features), learning_rate, gamma, gae_lambda, vf_coef }
    }

    fn update(&mut self) {
        if self.core.buffer.is_empty() {
            return;
        }
        let (adv, returns) = self.core.advantages(self.gamma, self.gae_lambda);
        let buffer = std::mem::take(&mut self.core.buffer);
        for (i, s) in buffer.iter().enumerate() {
            self.core.action_probs(&s.feats);
            self.core.actor_step(&s.feats, s.action, self.learning_rate * adv[i]);
            let v = self.core.value(&s.feats);
            self.core.critic_step(&s.feats, self.learning_rate * self.vf_coef * (returns[i] - v));
        }
    }
}

impl Learner for ActorCritic {
    fn policy(&self) -> &Policy {
        &self.core.actor
    }

    fn act(&mut self, feats: &[usize], rng: &mut ChaCha8Rng) -> usize {
        self.core.action_probs(feats);
        sample_index(&self.core.probs, rng)
    }

    fn observe(&mut self, t: Transition, _rng: &mut ChaCha8Rng) {
        self.core.push(t);
        if self.core.buffer.len() >= A2C_ROLLOUT {
            self.update();
        }
    }

    fn finish(&mut self, _rng: &mut ChaCha8Rng) {
        self.update();
    }

    fn parameters_finite(&self) -> bool {
        self.core.finite()
    }

    fn into_policy(self) -> Policy {
        self.core.actor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envlab::{make_env, PhysicsPresets, Task, Variant};
    use crate::seed::rng_from;
    use crate::trainers::Interaction;

    #[test]
    fn gae_matches_hand_computation() {
        let mut core = OnPolicyCore::new(2, 1);
        for (r, v, nv, done) in [(1.0, 0.5, 0.25, false), (2.0, 0.25, 0.0, true), (3.0, 1.0, 2.0, false)] {
            core.buffer.push(Sample { feats: vec![0], action: 0, reward: r, value: v, next_value: nv, done, old_logp: 0.0 });
        }
        let (g, l) = (0.9, 0.8);
        let (adv, ret) = core.advantages(g, l);
        let d2 = 3.0 + g * 2.0 - 1.0;
        let d1 = 2.0 + 0.0 - 0.25;
        let d0 = 1.0 + g * 0.25 - 0.5;
        assert!((adv[2] - d2).abs() < 1e-12);
        assert!((adv[1] - d1).abs() < 1e-12);
        assert!((adv[0] - (d0 + g * l * d1)).abs() < 1e-12);
        assert!((ret[0] - (adv[0] + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn clipping_engages_at_high_learning_rate() {
        let mut env = make_env(Task::GridSlip, Variant::M, &PhysicsPresets::bundled(), None).unwrap();
        let mut learner = ClippedPolicyGradient::new(4, 24, 0.01, 0.99, 0.1, 128);
        let mut rng = rng_from(&[3]);
        let mut inter = Interaction::new(&mut env, 3, 2_000);
        while !inter.exhausted() {
            let a = learner.act(inter.current(), &mut rng);
            let t = inter.step(a).unwrap();
            learner.observe(t, &mut rng);
        }
        assert!(learner.clipped_updates > 0);
    }
}
