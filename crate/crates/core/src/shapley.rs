//! Shapley attribution of a regression model's output.
//!
//! The coalition value is the interventional expectation
//! `v(S) = (1/B) Σ_b f(x_S, b_{-S})` over a background set. Exact values
//! enumerate all `2^m` coalitions once; interaction values reuse the same table.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{rng_from, Stage};

pub const EXACT_MAX_FEATURES: usize = 16;
pub const INTERACTION_MAX_FEATURES: usize = 12;
pub const DEFAULT_BACKGROUND_SIZE: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapleyError {
    #[error("background set is empty")]
    EmptyBackground,
    #[error("expected {expected} features, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("{m} features exceed the enumeration limit of {limit}")]
    TooManyFeatures { m: usize, limit: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("{0}")]
    InvalidArgument(String),
}

/// A model whose output is being explained.
pub trait Regressor: Sync {
    fn n_features(&self) -> usize;
    fn predict(&self, x: &[f64]) -> f64;
}

impl<R: Regressor + ?Sized> Regressor for &R {
    fn n_features(&self) -> usize {
        (**self).n_features()
    }
    fn predict(&self, x: &[f64]) -> f64 {
        (**self).predict(x)
    }
}

/// `f(x) = intercept + wᵀx`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl Regressor for LinearModel {
    fn n_features(&self) -> usize {
        self.weights.len()
    }
    fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Wraps a closure as a [`Regressor`].
pub struct FnModel<F> {
    m: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnModel<F> {
    pub fn new(m: usize, f: F) -> Self {
        Self { m, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Regressor for FnModel<F> {
    fn n_features(&self) -> usize {
        self.m
    }
    fn predict(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// Reference rows defining the expectation in `v(S)`; `base_value = v(∅)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSet {
    rows: Vec<Vec<f64>>,
    base_value: f64,
}

impl BackgroundSet {
    pub fn new<M: Regressor + ?Sized>(model: &M, rows: Vec<Vec<f64>>) -> Result<Self, ShapleyError> {
        if rows.is_empty() {
            return Err(ShapleyError::EmptyBackground);
        }
        let m = model.n_features();
        for r in &rows {
            check_row(m, r)?;
        }
        let base_value = rows.iter().map(|r| model.predict(r)).sum::<f64>() / rows.len() as f64;
        Ok(Self { rows, base_value })
    }

    /// Draws `size` rows without replacement (all rows if fewer are available).
    pub fn sample<M: Regressor + ?Sized>(model: &M, data: &[Vec<f64>], size: usize, seed: u64) -> Result<Self, ShapleyError> {
        if size == 0 {
            return Err(ShapleyError::EmptyBackground);
        }
        let rows = if data.len() <= size {
            data.to_vec()
        } else {
            let mut rng = rng_from(&[seed, Stage::Background as u64]);
            let mut idx = rand::seq::index::sample(&mut rng, data.len(), size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| data[i].clone()).collect()
        };
        Self::new(model, rows)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn base_value(&self) -> f64 {
        self.base_value
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn check_row(m: usize, x: &[f64]) -> Result<(), ShapleyError> {
    if x.len() != m {
        return Err(ShapleyError::WidthMismatch { expected: m, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ShapleyError::NonFinite);
    }
    Ok(())
}

fn check_inputs<M: Regressor + ?Sized>(model: &M, x: &[f64], bg: &BackgroundSet) -> Result<usize, ShapleyError> {
    let m = model.n_features();
    check_row(m, x)?;
    if let Some(r) = bg.rows.first() {
        if r.len() != m {
            return Err(ShapleyError::WidthMismatch { expected: m, got: r.len() });
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub x: Vec<f64>,
    pub base_value: f64,
    pub phi: Vec<f64>,
}

impl Attribution {
    /// `base_value + Σ φ`, equal to the model's prediction by efficiency.
    pub fn reconstructed(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>()
    }
}

/// Symmetric `m × m` matrix; off-diagonals are pairwise interactions, the
/// diagonal holds main effects so that each row sums to `φ_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionMatrix {
    pub values: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
}

impl InteractionMatrix {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }
}

fn value_with_mask<M: Regressor + ?Sized>(model: &M, x: &[f64], mask: u64, bg: &BackgroundSet, buf: &mut Vec<f64>) -> f64 {
    let mut total = 0.0;
    for row in &bg.rows {
        buf.clear();
        buf.extend(row.iter().zip(x).enumerate().map(|(k, (&b, &xv))| if mask >> k & 1 == 1 { xv } else { b }));
        total += model.predict(buf);
    }
    total / bg.rows.len() as f64
}

fn mask_of(s: &[usize], m: usize) -> Result<u64, ShapleyError> {
    let mut mask = 0u64;
    for &k in s {
        if k >= m {
            return Err(ShapleyError::InvalidArgument(format!("feature {k} out of range for m = {m}")));
        }
        mask |= 1 << k;
    }
    Ok(mask)
}

/// `v(S)`: mean prediction with features in `s` fixed to `x` and the rest
/// taken from each background row.
pub fn coalition_value<M: Regressor + ?Sized>(
    model: &M,
    x: &[f64],
    s: &[usize],
    bg: &BackgroundSet,
) -> Result<f64, ShapleyError> {
    let m = check_inputs(model, x, bg)?;
    let mask = mask_of(s, m)?;
    Ok(value_with_mask(model, x, mask, bg, &mut Vec::with_capacity(m)))
}

/// `v(S)` for every `S`, indexed by bitmask.
fn coalition_table<M: Regressor + ?Sized>(model: &M, x: &[f64], bg: &BackgroundSet, m: usize) -> Vec<f64> {
    let mut buf = Vec::with_capacity(m);
    (0..1u64 << m).map(|mask| value_with_mask(model, x, mask, bg, &mut buf)).collect()
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for k in 1..=n {
        f[k] = f[k - 1] * k as f64;
    }
    f
}

fn phi_from_table(v: &[f64], m: usize) -> Vec<f64> {
    let fact = factorials(m);
    // weight by coalition size: |S|! (m - |S| - 1)! / m!
    let w: Vec<f64> = (0..m).map(|s| fact[s] * fact[m - s - 1] / fact[m]).collect();
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u64 << i;
        for mask in 0..1u64 << m {
            if mask & bit == 0 {
                *p += w[mask.count_ones() as usize] * (v[(mask | bit) as usize] - v[mask as usize]);
            }
        }
    }
    phi
}

pub fn exact_shapley<M: Regressor + ?Sized>(model: &M, x: &[f64], bg: &BackgroundSet) -> Result<Attribution, ShapleyError> {
    let m = check_inputs(model, x, bg)?;
    if m > EXACT_MAX_FEATURES {
        return Err(ShapleyError::TooManyFeatures { m, limit: EXACT_MAX_FEATURES });
    }
    let v = coalition_table(model, x, bg, m);
    Ok(Attribution { x: x.to_vec(), base_value: bg.base_value, phi: phi_from_table(&v, m) })
}

/// Pairwise Shapley interaction index. Off-diagonal entries are
/// `½ Σ_{S ⊆ N∖{i,j}} |S|!(m−|S|−2)!/(m−1)! · Δ_ij v(S)`.
pub fn shapley_interactions<M: Regressor + ?Sized>(
    model: &M,
    x: &[f64],
    bg: &BackgroundSet,
) -> Result<InteractionMatrix, ShapleyError> {
    let m = check_inputs(model, x, bg)?;
    if m > INTERACTION_MAX_FEATURES {
        return Err(ShapleyError::TooManyFeatures { m, limit: INTERACTION_MAX_FEATURES });
    }
    let v = coalition_table(model, x, bg, m);
    let phi = phi_from_table(&v, m);
    let mut values = vec![vec![0.0; m]; m];
    if m >= 2 {
        let fact = factorials(m);
        let w: Vec<f64> = (0..m - 1).map(|s| fact[s] * fact[m - s - 2] / fact[m - 1]).collect();
        #[allow(clippy::needless_range_loop)]
        for i in 0..m {
            for j in i + 1..m {
                let (bi, bj) = (1u64 << i, 1u64 << j);
                let mut acc = 0.0;
                for mask in 0..1u64 << m {
                    if mask & (bi | bj) == 0 {
                        let s = mask as usize;
                        let d = v[s | (bi | bj) as usize] - v[s | bi as usize] - v[s | bj as usize] + v[s];
                        acc += w[mask.count_ones() as usize] * d;
                    }
                }
                values[i][j] = 0.5 * acc;
                values[j][i] = 0.5 * acc;
            }
        }
    }
    for i in 0..m {
        let off: f64 = (0..m).filter(|&j| j != i).map(|j| values[i][j]).sum();
        values[i][i] = phi[i] - off;
    }
    Ok(InteractionMatrix { values, phi })
}

/// Permutation-sampling estimate. Coalition values are memoized per mask, so
/// the number of model evaluations is bounded by `2^m · B`.
pub fn sampled_shapley<M: Regressor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &[f64],
    bg: &BackgroundSet,
    n_permutations: usize,
    rng: &mut R,
) -> Result<Attribution, ShapleyError> {
    let m = check_inputs(model, x, bg)?;
    if n_permutations == 0 {
        return Err(ShapleyError::InvalidArgument("n_permutations must be >= 1".into()));
    }
    if m > 63 {
        return Err(ShapleyError::TooManyFeatures { m, limit: 63 });
    }
    let mut memo: HashMap<u64, f64> = HashMap::new();
    let mut buf = Vec::with_capacity(m);
    let mut value = |mask: u64, buf: &mut Vec<f64>| *memo.entry(mask).or_insert_with(|| value_with_mask(model, x, mask, bg, buf));
    let empty = value(0, &mut buf);
    let mut phi = vec![0.0; m];
    let mut order: Vec<usize> = (0..m).collect();
    for _ in 0..n_permutations {
        order.shuffle(rng);
        let (mut mask, mut prev) = (0u64, empty);
        for &i in &order {
            mask |= 1 << i;
            let cur = value(mask, &mut buf);
            phi[i] += cur - prev;
            prev = cur;
        }
    }
    phi.iter_mut().for_each(|p| *p /= n_permutations as f64);
    Ok(Attribution { x: x.to_vec(), base_value: bg.base_value, phi })
}

/// Exact attributions for every row, in row order.
pub fn batch_explain<M: Regressor + ?Sized>(
    model: &M,
    rows: &[Vec<f64>],
    bg: &BackgroundSet,
) -> Result<Vec<Attribution>, ShapleyError> {
    rows.par_iter().map(|x| exact_shapley(model, x, bg)).collect()
}

/// Interaction matrices for every row, in row order.
pub fn batch_interactions<M: Regressor + ?Sized>(
    model: &M,
    rows: &[Vec<f64>],
    bg: &BackgroundSet,
) -> Result<Vec<InteractionMatrix>, ShapleyError> {
    rows.par_iter().map(|x| shapley_interactions(model, x, bg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn product() -> FnModel<impl Fn(&[f64]) -> f64 + Sync> {
        FnModel::new(2, |x: &[f64]| x[0] * x[1])
    }

    #[test]
    fn product_interaction_matches_hand_enumeration() {
        let f = product();
        let bg = BackgroundSet::new(&f, vec![vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let x = [2.0, 3.0];
        // v(∅) = -1, v({1}) = 2·0, v({2}) = 3·0, v({1,2}) = 6
        assert_eq!(bg.base_value(), -1.0);
        let im = shapley_interactions(&f, &x, &bg).unwrap();
        assert!((im.get(0, 1) - 2.5).abs() < 1e-12);
        assert!((im.get(1, 0) - 2.5).abs() < 1e-12);
        assert!((im.phi[0] - 3.5).abs() < 1e-12 && (im.phi[1] - 3.5).abs() < 1e-12);
        assert!((im.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coalition_extremes() {
        let f = LinearModel { weights: vec![1.0, 2.0, -1.0], intercept: 0.5 };
        let bg = BackgroundSet::new(&f, vec![vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let x = [3.0, -1.0, 4.0];
        assert!((coalition_value(&f, &x, &[0, 1, 2], &bg).unwrap() - f.predict(&x)).abs() < 1e-12);
        assert!((coalition_value(&f, &x, &[], &bg).unwrap() - bg.base_value()).abs() < 1e-12);
        let one = BackgroundSet::new(&f, vec![vec![10.0, 20.0, 30.0]]).unwrap();
        // spliced vector (3, 20, 30)
        assert_eq!(coalition_value(&f, &x, &[0], &one).unwrap(), 0.5 + 3.0 + 40.0 - 30.0);
    }

    #[test]
    fn single_player_sampling_is_exact() {
        let f = FnModel::new(1, |x: &[f64]| x[0].powi(3));
        let bg = BackgroundSet::new(&f, vec![vec![0.5], vec![-2.0]]).unwrap();
        let exact = exact_shapley(&f, &[1.5], &bg).unwrap();
        let mut rng = rng_from(&[9]);
        let s = sampled_shapley(&f, &[1.5], &bg, 3, &mut rng).unwrap();
        assert_eq!(s.phi, exact.phi);
    }

    #[test]
    fn guards() {
        let f = FnModel::new(17, |_: &[f64]| 0.0);
        let bg = BackgroundSet::new(&f, vec![vec![0.0; 17]]).unwrap();
        assert!(matches!(exact_shapley(&f, &[0.0; 17], &bg), Err(ShapleyError::TooManyFeatures { .. })));
        assert!(matches!(exact_shapley(&f, &[0.0; 3], &bg), Err(ShapleyError::WidthMismatch { .. })));
        assert!(matches!(BackgroundSet::new(&f, vec![]), Err(ShapleyError::EmptyBackground)));
    }

    #[test]
    fn background_sampling_is_seeded_and_without_replacement() {
        let f = LinearModel { weights: vec![1.0], intercept: 0.0 };
        let data: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64]).collect();
        let a = BackgroundSet::sample(&f, &data, 64, 5).unwrap();
        let b = BackgroundSet::sample(&f, &data, 64, 5).unwrap();
        assert_eq!(a, b);
        let mut vals: Vec<i64> = a.rows().iter().map(|r| r[0] as i64).collect();
        vals.dedup();
        assert_eq!(vals.len(), 64);
        assert_eq!(BackgroundSet::sample(&f, &data[..10], 64, 5).unwrap().len(), 10);
    }
}
