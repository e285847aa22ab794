//! Shared generators and brute-force oracles for the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use simgap::shapley::Regressor;
use simgap::surrogate::{ForestModel, Node, Tree};

/// A random tree of the given depth splitting only on `features`.
pub fn random_tree(features: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> Tree {
    fn grow(nodes: &mut Vec<Node>, features: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let k = nodes.len();
        if depth == 0 || features.is_empty() || rng.gen_bool(0.15) {
            nodes.push(Node::Leaf { value: rng.gen_range(-10.0..10.0) });
            return k;
        }
        nodes.push(Node::Leaf { value: 0.0 });
        let feature = features[rng.gen_range(0..features.len())];
        let threshold = rng.gen_range(0.05..0.95);
        let left = grow(nodes, features, depth - 1, rng);
        let right = grow(nodes, features, depth - 1, rng);
        nodes[k] = Node::Split { feature, threshold, left, right };
        k
    }
    let mut nodes = Vec::new();
    grow(&mut nodes, features, depth, rng);
    Tree { nodes }
}

pub fn random_forest(m: usize, features: &[usize], n_trees: usize, rng: &mut ChaCha8Rng) -> ForestModel {
    let depth = rng.gen_range(1..=5);
    let trees = (0..n_trees).map(|_| random_tree(features, depth, rng)).collect();
    ForestModel::from_trees(m, trees)
}

/// Same tree with features `i` and `j` exchanged.
pub fn mirrored(tree: &Tree, i: usize, j: usize) -> Tree {
    let swap = |f: usize| {
        if f == i {
            j
        } else if f == j {
            i
        } else {
            f
        }
    };
    let nodes = tree
        .nodes
        .iter()
        .map(|n| match *n {
            Node::Split { feature, threshold, left, right } => Node::Split { feature: swap(feature), threshold, left, right },
            ref leaf => leaf.clone(),
        })
        .collect();
    Tree { nodes }
}

pub fn random_rows(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..m).map(|_| rng.gen::<f64>()).collect()).collect()
}

/// v(S) by splicing `x` into every background row and averaging.
pub fn value(model: &dyn Regressor, x: &[f64], mask: u32, bg: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for b in bg {
        let z: Vec<f64> = (0..x.len()).map(|k| if mask >> k & 1 == 1 { x[k] } else { b[k] }).collect();
        total += model.predict(&z);
    }
    total / bg.len() as f64
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Shapley values straight from the definition: a loop over features and,
/// inside it, a loop over every coalition without that feature.
pub fn brute_shapley(model: &dyn Regressor, x: &[f64], bg: &[Vec<f64>]) -> Vec<f64> {
    let m = x.len();
    (0..m)
        .map(|i| {
            let mut phi = 0.0;
            for s in 0u32..1 << m {
                if s >> i & 1 == 1 {
                    continue;
                }
                let size = s.count_ones() as usize;
                let w = factorial(size) * factorial(m - size - 1) / factorial(m);
                phi += w * (value(model, x, s | 1 << i, bg) - value(model, x, s, bg));
            }
            phi
        })
        .collect()
}

/// Off-diagonal pairwise interaction from the definition, halved so that
/// rows of the full matrix sum to the Shapley values.
pub fn brute_interaction(model: &dyn Regressor, x: &[f64], bg: &[Vec<f64>], i: usize, j: usize) -> f64 {
    let m = x.len();
    let mut total = 0.0;
    for s in 0u32..1 << m {
        if s >> i & 1 == 1 || s >> j & 1 == 1 {
            continue;
        }
        let size = s.count_ones() as usize;
        let w = factorial(size) * factorial(m - size - 2) / (2.0 * factorial(m - 1));
        let (si, sj) = (s | 1 << i, s | 1 << j);
        total += w * (value(model, x, si | sj, bg) - value(model, x, si, bg) - value(model, x, sj, bg) + value(model, x, s, bg));
    }
    total
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

pub fn names(m: usize) -> Vec<String> {
    (0..m).map(|k| format!("z{k}")).collect()
}

/// Uniform features with a target the trees can represent.
pub fn recoverable_dataset(n: usize, seed: u64) -> simgap::surrogate::Dataset {
    let mut rng = simgap::seed::rng_from(&[seed, 0xDA7A]);
    let x = random_rows(n, 4, &mut rng);
    let y = x.iter().map(|r| 4.0 * (r[0] > 0.5) as i32 as f64 + 3.0 * r[1] * r[1] - 2.0 * r[2]).collect();
    simgap::surrogate::Dataset::new(x, y, names(4)).unwrap()
}

/// Uniform features with a target independent of them.
pub fn noise_dataset(n: usize, seed: u64) -> simgap::surrogate::Dataset {
    let mut rng = simgap::seed::rng_from(&[seed, 0x0015E]);
    let x = random_rows(n, 4, &mut rng);
    let y = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    simgap::surrogate::Dataset::new(x, y, names(4)).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
