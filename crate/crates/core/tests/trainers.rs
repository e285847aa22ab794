use simgap::config_space::{Configuration, ConfigurationSpace, Domain};
use simgap::envlab::{make_env, ChainFixture, Env, GridSlip, GridSlipPhysics, PhysicsPresets, Task, Variant};
use simgap::trainers::{evaluate, evaluate_with, train, EvalMode, Policy, PolicyKind, TrainBudget};

fn endpoints(space: &ConfigurationSpace, alg: u8, slot: usize) -> (f64, f64) {
    match &space.algorithm(alg).unwrap().slot(slot).domain {
        Domain::Continuous { low, high, .. } => (*low, *high),
        Domain::Choice { choices } => (choices[0], *choices.last().unwrap()),
    }
}

fn midpoint_config(space: &ConfigurationSpace, alg: u8) -> Configuration {
    let spec = space.algorithm(alg).unwrap();
    Configuration { algorithm_id: alg, values: std::array::from_fn(|s| spec.slot(s).value_at(0.5)) }
}

#[test]
fn every_slot_changes_training() {
    let space = ConfigurationSpace::default_space();
    let presets = PhysicsPresets::bundled();
    // long enough for the smallest replay capacity to wrap
    let budget = TrainBudget { total_env_steps: 12_000, eval_episodes: 1 };
    for alg in 0..4u8 {
        for slot in 0..4 {
            let (lo, hi) = endpoints(&space, alg, slot);
            let mut tables = Vec::new();
            for v in [lo, hi] {
                let mut c = midpoint_config(&space, alg);
                c.values[slot] = v;
                let mut env = make_env(Task::GridSlip, Variant::M, &presets, None).unwrap();
                tables.push(train(alg, &c, &mut env, 5, &budget).unwrap().policy.weights);
            }
            assert_ne!(tables[0], tables[1], "algorithm {alg} slot {slot} has no effect");
        }
    }
}

/// Q-values of the chain by backward induction.
fn chain_values(gamma: f64) -> [[f64; 2]; 3] {
    let q1 = [0.5, 0.0];
    let q2 = [0.0, 10.0];
    let v = |q: [f64; 2]| q[0].max(q[1]);
    [[1.0 + gamma * v(q1), gamma * v(q2)], q1, q2]
}

#[test]
fn myopic_replay_q_learns_the_myopic_action() {
    let q = chain_values(0.0);
    let optimal: Vec<usize> = q.iter().map(|r| if r[1] > r[0] { 1 } else { 0 }).collect();
    assert_eq!(optimal, [0, 0, 1]);
    // with weight on the future the first choice flips, so the test discriminates
    assert!(chain_values(0.9)[0][1] > chain_values(0.9)[0][0]);

    let c = Configuration { algorithm_id: 2, values: [0.1, 0.0, 1.0, 10_000.0] };
    let mut env = ChainFixture::new();
    let result = train(2, &c, &mut env, 3, &TrainBudget { total_env_steps: 6_000, eval_episodes: 1 }).unwrap();
    assert_eq!(result.policy.kind, PolicyKind::GreedyQ);
    let learned: Vec<usize> = (0..3).map(|s| result.policy.mode_action(&[s])).collect();
    assert_eq!(learned, optimal);
}

/// Expected undiscounted return of the uniform random policy, by backward
/// induction over the horizon on the slip-free grid.
fn uniform_grid_return(step_cost: f64) -> f64 {
    const W: i32 = 6;
    const H: i32 = 4;
    let moves = [(0, 1), (1, 0), (0, -1), (-1, 0)];
    let mut next = vec![0.0; (W * H) as usize];
    for _ in 0..200 {
        let mut cur = vec![0.0; (W * H) as usize];
        for y in 0..H {
            for x in 0..W {
                let mut v = 0.0;
                for (dx, dy) in moves {
                    let (nx, ny) = ((x + dx).clamp(0, W - 1), (y + dy).clamp(0, H - 1));
                    v += step_cost
                        + if (nx, ny) == (5, 0) {
                            1.0
                        } else if ny == 0 && (1..=4).contains(&nx) {
                            -1.0
                        } else {
                            next[(ny * W + nx) as usize]
                        };
                }
                cur[(y * W + x) as usize] = v / 4.0;
            }
        }
        next = cur;
    }
    next[0]
}

#[test]
fn uniform_policy_matches_absorption_analysis() {
    let expected = uniform_grid_return(-0.01);
    let mut env = GridSlip::new(Variant::M, GridSlipPhysics { slip_prob: 0.0, wind_bias: 0.0, step_cost: -0.01 }).unwrap();
    let policy = Policy::zeros(PolicyKind::SoftmaxLinear, 4, env.n_features(), 1.0);
    let n = 20_000;
    let returns: Vec<f64> = (0..n).map(|s| evaluate_with(&policy, &mut env, 1, s as u64, EvalMode::Sample).unwrap()).collect();
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - expected).abs() < 4.0 * se, "mean {mean}, oracle {expected}, se {se}");
}

#[test]
fn training_is_bit_reproducible_and_transfers() {
    let space = ConfigurationSpace::default_space();
    let presets = PhysicsPresets::bundled();
    let budget = TrainBudget { total_env_steps: 4_000, eval_episodes: 3 };
    for task in [Task::GridSlip, Task::PendulumLite] {
        for alg in 0..4u8 {
            let c = midpoint_config(&space, alg);
            let mut a = make_env(task, Variant::M, &presets, None).unwrap();
            let mut b = make_env(task, Variant::M, &presets, None).unwrap();
            let ra = train(alg, &c, &mut a, 9, &budget).unwrap();
            let rb = train(alg, &c, &mut b, 9, &budget).unwrap();
            assert_eq!(ra.policy.weights, rb.policy.weights);
            assert_eq!(ra.env_steps, budget.total_env_steps);
            let mut target = make_env(task, Variant::P, &presets, None).unwrap();
            let js = evaluate(&ra.policy, &mut a, 3, 1).unwrap();
            let jt = evaluate(&ra.policy, &mut target, 3, 1).unwrap();
            assert!(js.is_finite() && jt.is_finite());
            assert_eq!(jt, evaluate(&ra.policy, &mut target, 3, 1).unwrap());
        }
    }
}
