//! Small environments with known answers, used as test oracles.

use super::{Env, EnvError, EnvState, PhysicsParams, StepOutcome};

/// One-step episode whose only reward is `wᵀω`, whatever the action.
#[derive(Debug, Clone)]
pub struct AnalyticFixture {
    weights: Vec<f64>,
    omega: Vec<f64>,
    done: bool,
}

impl AnalyticFixture {
    pub fn new(weights: Vec<f64>, omega: Vec<f64>) -> Result<Self, EnvError> {
        if weights.len() != omega.len() {
            return Err(EnvError::TaskMismatch);
        }
        PhysicsParams::Linear(weights.clone()).validate()?;
        PhysicsParams::Linear(omega.clone()).validate()?;
        Ok(Self { weights, omega, done: false })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn expected_return(&self) -> f64 {
        self.weights.iter().zip(&self.omega).map(|(w, o)| w * o).sum()
    }
}

impl Env for AnalyticFixture {
    fn n_actions(&self) -> usize {
        1
    }
    fn n_features(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        1
    }
    fn reset(&mut self, _seed: u64) -> EnvState {
        self.done = false;
        EnvState { obs: vec![0.0], done: false, step: 0 }
    }
    fn step(&mut self, _action: usize) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        self.done = true;
        Ok(StepOutcome {
            next_state: EnvState { obs: vec![0.0], done: true, step: 1 },
            reward: self.expected_return(),
            done: true,
            terminal: true,
        })
    }
    fn featurize(&self, _obs: &[f64], out: &mut Vec<usize>) {
        out.clear();
        out.push(0);
    }
    fn physics(&self) -> PhysicsParams {
        PhysicsParams::Linear(self.omega.clone())
    }
    fn with_physics(&self, physics: &PhysicsParams) -> Result<Self, EnvError> {
        match physics {
            PhysicsParams::Linear(o) => AnalyticFixture::new(self.weights.clone(), o.clone()),
            _ => Err(EnvError::TaskMismatch),
        }
    }
}

/// Deterministic two-step chain with two actions.
///
/// ```text
/// s0 --a0 (r = 1)--> s1 --a0 (r = 0.5) / a1 (r = 0)--> end
/// s0 --a1 (r = 0)--> s2 --a0 (r = 0)   / a1 (r = 10)--> end
/// ```
///
/// Myopically `a0` is best in `s0`; with enough discounting weight on the
/// future, `a1` is.
#[derive(Debug, Clone, Default)]
pub struct ChainFixture {
    state: usize,
    steps: usize,
    done: bool,
}

impl ChainFixture {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Env for ChainFixture {
    fn n_actions(&self) -> usize {
        2
    }
    fn n_features(&self) -> usize {
        3
    }
    fn horizon(&self) -> usize {
        2
    }
    fn reset(&mut self, _seed: u64) -> EnvState {
        self.state = 0;
        self.steps = 0;
        self.done = false;
        EnvState { obs: vec![0.0], done: false, step: 0 }
    }
    fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action >= 2 {
            return Err(EnvError::InvalidAction { action, n_actions: 2 });
        }
        let (reward, next, terminal) = match (self.state, action) {
            (0, 0) => (1.0, 1, false),
            (0, _) => (0.0, 2, false),
            (1, 0) => (0.5, 0, true),
            (1, _) => (0.0, 0, true),
            (_, 0) => (0.0, 0, true),
            (_, _) => (10.0, 0, true),
        };
        self.state = next;
        self.steps += 1;
        self.done = terminal;
        Ok(StepOutcome {
            next_state: EnvState { obs: vec![next as f64], done: terminal, step: self.steps },
            reward,
            done: terminal,
            terminal,
        })
    }
    fn featurize(&self, obs: &[f64], out: &mut Vec<usize>) {
        out.clear();
        out.push(obs[0] as usize);
    }
    fn physics(&self) -> PhysicsParams {
        PhysicsParams::Linear(Vec::new())
    }
    fn with_physics(&self, _physics: &PhysicsParams) -> Result<Self, EnvError> {
        Ok(Self::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_return_is_dot_product() {
        let mut f = AnalyticFixture::new(vec![0.0, 0.0], vec![3.0, -2.0]).unwrap();
        f.reset(0);
        assert_eq!(f.step(0).unwrap().reward, 0.0);
        let mut f = AnalyticFixture::new(vec![1.0, 2.0], vec![3.0, -2.0]).unwrap();
        f.reset(0);
        assert_eq!(f.step(0).unwrap().reward, -1.0);
    }

    #[test]
    fn chain_rewards() {
        let mut c = ChainFixture::new();
        c.reset(0);
        assert_eq!(c.step(1).unwrap().reward, 0.0);
        let last = c.step(1).unwrap();
        assert_eq!(last.reward, 10.0);
        assert!(last.done);
    }
}
