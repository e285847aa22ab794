mod common;

use common::*;
use rand::Rng;
use simgap::seed::rng_from;
use simgap::shapley::{
    batch_explain, coalition_value, exact_shapley, sampled_shapley, shapley_interactions, BackgroundSet, FnModel, LinearModel,
};

#[test]
fn cached_enumeration_matches_direct_definition() {
    let mut rng = rng_from(&[1]);
    for case in 0..40 {
        let m = 2 + case % 4;
        let all: Vec<usize> = (0..m).collect();
        let f = random_forest(m, &all, 6, &mut rng);
        let rows = random_rows(16, m, &mut rng);
        let bg = BackgroundSet::new(&f, rows.clone()).unwrap();
        let x = random_rows(1, m, &mut rng).remove(0);
        let fast = exact_shapley(&f, &x, &bg).unwrap();
        let slow = brute_shapley(&f, &x, &rows);
        for (a, b) in fast.phi.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-9, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn interactions_match_direct_definition() {
    let mut rng = rng_from(&[2]);
    for _ in 0..20 {
        let m = rng.gen_range(2..=5);
        let all: Vec<usize> = (0..m).collect();
        let f = random_forest(m, &all, 5, &mut rng);
        let rows = random_rows(12, m, &mut rng);
        let bg = BackgroundSet::new(&f, rows.clone()).unwrap();
        let x = random_rows(1, m, &mut rng).remove(0);
        let im = shapley_interactions(&f, &x, &bg).unwrap();
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    assert!((im.get(i, j) - brute_interaction(&f, &x, &rows, i, j)).abs() <= 1e-9);
                    assert_eq!(im.get(i, j), im.get(j, i));
                }
            }
            let row: f64 = (0..m).map(|j| im.get(i, j)).sum();
            assert!((row - im.phi[i]).abs() <= 1e-9);
        }
    }
}

#[test]
fn single_row_background_is_a_splice() {
    let f = FnModel::new(3, |x: &[f64]| x[0] * x[1] - x[2].powi(2));
    let bg = BackgroundSet::new(&f, vec![vec![0.5, 2.0, -1.0]]).unwrap();
    let x = [3.0, -1.0, 4.0];
    // S = {0, 2}: (3, 2, 4)
    assert_eq!(coalition_value(&f, &x, &[0, 2], &bg).unwrap(), 3.0 * 2.0 - 16.0);
    assert_eq!(coalition_value(&f, &x, &[1], &bg).unwrap(), -0.5 - 1.0);
}

#[test]
fn linear_models_follow_the_closed_form() {
    let mut rng = rng_from(&[3]);
    for _ in 0..20 {
        let m = rng.gen_range(1..=6);
        let w: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let f = LinearModel { weights: w.clone(), intercept: rng.gen_range(-1.0..1.0) };
        let rows = random_rows(64, m, &mut rng);
        let bg = BackgroundSet::new(&f, rows.clone()).unwrap();
        let x = random_rows(1, m, &mut rng).remove(0);
        let a = exact_shapley(&f, &x, &bg).unwrap();
        for i in 0..m {
            let mean = rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64;
            assert!((a.phi[i] - w[i] * (x[i] - mean)).abs() <= 1e-9);
        }
    }
}

#[test]
fn unused_feature_gets_nothing() {
    let mut rng = rng_from(&[4]);
    for _ in 0..30 {
        let f = random_forest(5, &[0, 1, 3, 4], 8, &mut rng);
        let bg = BackgroundSet::new(&f, random_rows(32, 5, &mut rng)).unwrap();
        let x = random_rows(1, 5, &mut rng).remove(0);
        assert!(exact_shapley(&f, &x, &bg).unwrap().phi[2].abs() <= 1e-12);
    }
}

#[test]
fn symmetric_features_share_credit() {
    let mut rng = rng_from(&[5]);
    for _ in 0..30 {
        let base = random_forest(4, &[0, 1, 2, 3], 6, &mut rng);
        let trees = base.trees.iter().flat_map(|t| [t.clone(), mirrored(t, 1, 2)]).collect();
        let f = simgap::surrogate::ForestModel::from_trees(4, trees);
        let mut rows = random_rows(32, 4, &mut rng);
        rows.iter_mut().for_each(|r| r[2] = r[1]);
        let bg = BackgroundSet::new(&f, rows).unwrap();
        let mut x = random_rows(1, 4, &mut rng).remove(0);
        x[2] = x[1];
        let phi = exact_shapley(&f, &x, &bg).unwrap().phi;
        assert!((phi[1] - phi[2]).abs() <= 1e-9);
    }
}

#[test]
fn attributions_are_linear_in_the_model() {
    let mut rng = rng_from(&[6]);
    for _ in 0..20 {
        let all = [0, 1, 2, 3, 4];
        let f1 = random_forest(5, &all, 4, &mut rng);
        let f2 = random_forest(5, &all, 4, &mut rng);
        let sum = FnModel::new(5, |x: &[f64]| f1.predict(x) + f2.predict(x));
        let rows = random_rows(24, 5, &mut rng);
        let x = random_rows(1, 5, &mut rng).remove(0);
        let a1 = exact_shapley(&f1, &x, &BackgroundSet::new(&f1, rows.clone()).unwrap()).unwrap();
        let a2 = exact_shapley(&f2, &x, &BackgroundSet::new(&f2, rows.clone()).unwrap()).unwrap();
        let a = exact_shapley(&sum, &x, &BackgroundSet::new(&sum, rows).unwrap()).unwrap();
        for i in 0..5 {
            assert!((a.phi[i] - a1.phi[i] - a2.phi[i]).abs() <= 1e-9);
        }
    }
}

#[test]
fn additive_models_do_not_interact() {
    let f = FnModel::new(3, |x: &[f64]| x[0].sin() + x[1] * x[1] + (2.0 * x[2]).exp());
    let mut rng = rng_from(&[7]);
    let bg = BackgroundSet::new(&f, random_rows(64, 3, &mut rng)).unwrap();
    for _ in 0..10 {
        let x = random_rows(1, 3, &mut rng).remove(0);
        let im = shapley_interactions(&f, &x, &bg).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(im.get(i, j).abs() <= 1e-12, "{}", im.get(i, j));
                }
            }
        }
    }
}

#[test]
fn sampling_converges_and_is_reproducible() {
    let mut rng = rng_from(&[8]);
    let all = [0, 1, 2, 3, 4];
    let f = random_forest(5, &all, 10, &mut rng);
    let bg = BackgroundSet::new(&f, random_rows(64, 5, &mut rng)).unwrap();
    let x = random_rows(1, 5, &mut rng).remove(0);
    let exact = exact_shapley(&f, &x, &bg).unwrap();
    let s1 = sampled_shapley(&f, &x, &bg, 20_000, &mut rng_from(&[99])).unwrap();
    let s2 = sampled_shapley(&f, &x, &bg, 20_000, &mut rng_from(&[99])).unwrap();
    assert_eq!(s1, s2);
    let tol = 0.05 * (max_abs(&exact.phi) + 1e-9);
    for (a, b) in s1.phi.iter().zip(&exact.phi) {
        assert!((a - b).abs() <= tol);
    }
}

#[test]
fn batches_agree_with_single_calls() {
    let mut rng = rng_from(&[9]);
    let all = [0, 1, 2, 3, 4];
    let f = random_forest(5, &all, 8, &mut rng);
    let bg = BackgroundSet::new(&f, random_rows(64, 5, &mut rng)).unwrap();
    let mut rows = random_rows(100, 5, &mut rng);
    rows[1] = rows[0].clone();
    let batch = batch_explain(&f, &rows, &bg).unwrap();
    assert_eq!(batch[0].phi, batch[1].phi);
    for (x, a) in rows.iter().zip(&batch) {
        assert_eq!(a, &exact_shapley(&f, x, &bg).unwrap());
    }
    let n = rows.len() as f64;
    let mean_pred = rows.iter().map(|x| f.predict(x)).sum::<f64>() / n;
    let mean_phi_sum: f64 = batch.iter().map(|a| a.phi.iter().sum::<f64>()).sum::<f64>() / n;
    assert!((mean_phi_sum + bg.base_value() - mean_pred).abs() <= 1e-9);
}
