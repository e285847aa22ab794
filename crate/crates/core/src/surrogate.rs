//! Random-forest regression of the generalization gap on encoded configurations.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config_space::{ConfigurationSpace, SpaceError};
use crate::runner::ExperimentRecord;
use crate::seed::{derive_seed, rng_from, Stage};
use crate::shapley::Regressor;

pub const MIN_ROWS: usize = 10;
pub const MIN_CV_ROWS: usize = 25;
pub const CV_FOLDS: usize = 5;
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("dataset has {0} rows; at least {MIN_ROWS} are required")]
    TooFewRows(usize),
    #[error("cross-validation needs at least {MIN_CV_ROWS} rows, got {0}")]
    TooFewForCv(usize),
    #[error("dataset contains a non-finite value at row {0}")]
    NonFinite(usize),
    #[error("row {row} has {got} features, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
    #[error("no records for algorithm {0}")]
    NoRecords(u8),
    #[error("unsupported model artifact version {0}")]
    Version(u32),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    /// Source record of each row, when built from a results file.
    #[serde(default)]
    pub record_ids: Vec<String>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>, feature_names: Vec<String>) -> Result<Self, SurrogateError> {
        let d = Self { x, y, feature_names, record_ids: Vec::new() };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        if self.x.len() < MIN_ROWS || self.y.len() != self.x.len() {
            return Err(SurrogateError::TooFewRows(self.x.len().min(self.y.len())));
        }
        let m = self.feature_names.len();
        for (i, (row, y)) in self.x.iter().zip(&self.y).enumerate() {
            if row.len() != m {
                return Err(SurrogateError::Ragged { row: i, expected: m, got: row.len() });
            }
            if !y.is_finite() || row.iter().any(|v| !v.is_finite()) {
                return Err(SurrogateError::NonFinite(i));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// All records, five features: algorithm code followed by the normalized slots.
    pub fn global(records: &[ExperimentRecord], space: &ConfigurationSpace) -> Result<Self, SurrogateError> {
        let mut x = Vec::with_capacity(records.len());
        for r in records {
            x.push(space.encode(&r.config())?.0.to_vec());
        }
        let mut d = Self::new(x, records.iter().map(|r| r.gap).collect(), space.global_feature_names())?;
        d.record_ids = records.iter().map(|r| r.record_id()).collect();
        Ok(d)
    }

    /// Records of one algorithm, four features named after that algorithm's slots.
    pub fn per_algorithm(
        records: &[ExperimentRecord],
        space: &ConfigurationSpace,
        algorithm_id: u8,
    ) -> Result<Self, SurrogateError> {
        let alg = space.algorithm(algorithm_id)?;
        let mine: Vec<&ExperimentRecord> = records.iter().filter(|r| r.algorithm_id == algorithm_id).collect();
        if mine.is_empty() {
            return Err(SurrogateError::NoRecords(algorithm_id));
        }
        let mut x = Vec::with_capacity(mine.len());
        for r in &mine {
            x.push(space.encode(&r.config())?.slots().to_vec());
        }
        let names = alg.slot_names().iter().map(|s| s.to_string()).collect();
        let mut d = Self::new(x, mine.iter().map(|r| r.gap).collect(), names)?;
        d.record_ids = mine.iter().map(|r| r.record_id()).collect();
        Ok(d)
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            record_ids: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Fraction of features considered at each split.
    pub feature_subsample: f64,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 200, max_depth: 8, min_leaf: 3, feature_subsample: 1.0, bootstrap: true }
    }
}

impl ForestParams {
    fn validate(&self) -> Result<(), SurrogateError> {
        if self.n_trees == 0 || self.min_leaf == 0 {
            return Err(SurrogateError::InvalidParams("n_trees and min_leaf must be >= 1".into()));
        }
        if !(self.feature_subsample > 0.0 && self.feature_subsample <= 1.0) {
            return Err(SurrogateError::InvalidParams("feature_subsample must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Regression tree stored as a flat node list, root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Self { nodes: vec![Node::Leaf { value }] }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => k = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, k: usize) -> usize {
            match t.nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a ForestParams,
    n_try: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn mean(&self, idx: &[usize]) -> f64 {
        idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64
    }

    /// Best SSE-reducing split as `(feature, threshold)`; ties keep the first found.
    fn best_split(&self, idx: &mut [usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let m = self.x[0].len();
        let mut features: Vec<usize> = (0..m).collect();
        if self.n_try < m {
            features.shuffle(rng);
            features.truncate(self.n_try);
            features.sort_unstable();
        }
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let parent = total * total / n as f64;
        let min_leaf = self.params.min_leaf;
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &features {
            idx.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left = 0.0;
            for k in 0..n - 1 {
                left += self.y[idx[k]];
                let nl = k + 1;
                let (lo, hi) = (self.x[idx[k]][f], self.x[idx[k + 1]][f]);
                if nl < min_leaf || n - nl < min_leaf || lo == hi {
                    continue;
                }
                let right = total - left;
                // SSE reduction = Σ_children s²/n − s_parent²/n_parent
                let gain = left * left / nl as f64 + right * right / (n - nl) as f64 - parent;
                if gain > 1e-12 * (1.0 + parent.abs()) && best.is_none_or(|(g, _, _)| gain > g) {
                    let mid = 0.5 * (lo + hi);
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some((gain, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let at = self.nodes.len();
        let value = self.mean(idx);
        self.nodes.push(Node::Leaf { value });
        if depth >= self.params.max_depth || idx.len() < 2 * self.params.min_leaf {
            return at;
        }
        let Some((feature, threshold)) = self.best_split(idx, rng) else {
            return at;
        };
        let (mut l, mut r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(&mut l, depth + 1, rng);
        let right = self.grow(&mut r, depth + 1, rng);
        self.nodes[at] = Node::Split { feature, threshold, left, right };
        at
    }
}

fn fit_tree(data: &Dataset, params: &ForestParams, seed: u64) -> Tree {
    let mut rng = rng_from(&[seed]);
    let n = data.len();
    let mut idx: Vec<usize> = if params.bootstrap { (0..n).map(|_| rng.gen_range(0..n)).collect() } else { (0..n).collect() };
    let m = data.n_features();
    let n_try = ((params.feature_subsample * m as f64).ceil() as usize).clamp(1, m.max(1));
    let mut b = Builder { x: &data.x, y: &data.y, params, n_try, nodes: Vec::new() };
    if m == 0 {
        return Tree::leaf(b.mean(&idx));
    }
    b.grow(&mut idx, 0, &mut rng);
    Tree { nodes: b.nodes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub n_features: usize,
    pub params: ForestParams,
    pub fit_seed: u64,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    pub fn from_trees(n_features: usize, trees: Vec<Tree>) -> Self {
        let params = ForestParams { n_trees: trees.len(), ..ForestParams::default() };
        Self { n_features, params, fit_seed: 0, trees }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_many(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.predict(r)).collect()
    }
}

impl Regressor for ForestModel {
    fn n_features(&self) -> usize {
        self.n_features
    }
    fn predict(&self, x: &[f64]) -> f64 {
        ForestModel::predict(self, x)
    }
}

/// Fits `params.n_trees` trees, each on its own bootstrap resample drawn from a
/// seed derived from `(seed, tree index)`.
pub fn fit(data: &Dataset, params: &ForestParams, seed: u64) -> Result<ForestModel, SurrogateError> {
    data.validate()?;
    params.validate()?;
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| fit_tree(data, params, derive_seed(&[seed, Stage::Fit as u64, t as u64])))
        .collect();
    Ok(ForestModel { n_features: data.n_features(), params: *params, fit_seed: seed, trees })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub k: usize,
    /// Pooled out-of-fold R².
    pub r2: f64,
    pub mae: f64,
    pub fold_r2: Vec<f64>,
    pub fold_mae: Vec<f64>,
    pub fold_sizes: Vec<usize>,
}

pub fn r_squared(y: &[f64], pred: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let sse: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    if sst == 0.0 {
        return if sse == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - sse / sst
}

pub fn mean_abs_error(y: &[f64], pred: &[f64]) -> f64 {
    y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64
}

/// Fold index of each row: a seeded shuffle dealt round-robin into `k` folds.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(&[seed, Stage::Fit as u64, 0xF01D]));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

pub fn cross_validate(data: &Dataset, params: &ForestParams, seed: u64) -> Result<FitReport, SurrogateError> {
    data.validate()?;
    if data.len() < MIN_CV_ROWS {
        return Err(SurrogateError::TooFewForCv(data.len()));
    }
    let fold = fold_assignment(data.len(), CV_FOLDS, seed);
    let mut pooled = vec![0.0; data.len()];
    let (mut fold_r2, mut fold_mae, mut fold_sizes) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..CV_FOLDS {
        let train: Vec<usize> = (0..data.len()).filter(|&i| fold[i] != k).collect();
        let test: Vec<usize> = (0..data.len()).filter(|&i| fold[i] == k).collect();
        let model = fit(&data.subset(&train), params, derive_seed(&[seed, k as u64]))?;
        let y: Vec<f64> = test.iter().map(|&i| data.y[i]).collect();
        let p: Vec<f64> = test.iter().map(|&i| model.predict(&data.x[i])).collect();
        for (&i, &v) in test.iter().zip(&p) {
            pooled[i] = v;
        }
        fold_r2.push(r_squared(&y, &p));
        fold_mae.push(mean_abs_error(&y, &p));
        fold_sizes.push(test.len());
    }
    Ok(FitReport {
        k: CV_FOLDS,
        r2: r_squared(&data.y, &pooled),
        mae: mean_abs_error(&data.y, &pooled),
        fold_r2,
        fold_mae,
        fold_sizes,
    })
}

/// Mean increase in squared error when each feature column is shuffled.
pub fn permutation_importance<M: Regressor + ?Sized>(model: &M, data: &Dataset, repeats: usize, seed: u64) -> Vec<f64> {
    let mse = |rows: &[Vec<f64>]| {
        rows.iter().zip(&data.y).map(|(r, y)| (model.predict(r) - y).powi(2)).sum::<f64>() / data.len() as f64
    };
    let baseline = mse(&data.x);
    let mut rng = rng_from(&[seed, 0x1A9]);
    (0..data.n_features())
        .map(|f| {
            let mut total = 0.0;
            for _ in 0..repeats.max(1) {
                let mut col: Vec<f64> = data.x.iter().map(|r| r[f]).collect();
                col.shuffle(&mut rng);
                let rows: Vec<Vec<f64>> = data
                    .x
                    .iter()
                    .zip(&col)
                    .map(|(r, &v)| {
                        let mut r = r.clone();
                        r[f] = v;
                        r
                    })
                    .collect();
                total += mse(&rows) - baseline;
            }
            total / repeats.max(1) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelScope {
    Global,
    PerAlgorithm { algorithm_id: u8 },
}

/// One fitted model plus what the explainer needs from its training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub scope: ModelScope,
    pub feature_names: Vec<String>,
    pub forest: ForestModel,
    pub fit_report: Option<FitReport>,
    pub training_x: Vec<Vec<f64>>,
    pub training_ids: Vec<String>,
}

impl SurrogateModel {
    pub fn train(
        scope: ModelScope,
        data: &Dataset,
        params: &ForestParams,
        seed: u64,
        with_cv: bool,
    ) -> Result<Self, SurrogateError> {
        let forest = fit(data, params, seed)?;
        let fit_report = if with_cv && data.len() >= MIN_CV_ROWS { Some(cross_validate(data, params, seed)?) } else { None };
        Ok(Self {
            scope,
            feature_names: data.feature_names.clone(),
            forest,
            fit_report,
            training_x: data.x.clone(),
            training_ids: data.record_ids.clone(),
        })
    }
}

/// Versioned model file holding one global model or one model per algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub models: Vec<SurrogateModel>,
}

impl ModelArtifact {
    pub fn new(models: Vec<SurrogateModel>) -> Self {
        Self { format_version: ARTIFACT_VERSION, models }
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        let a: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if a.format_version != ARTIFACT_VERSION {
            return Err(SurrogateError::Version(a.format_version));
        }
        Ok(a)
    }

    pub fn global(&self) -> Option<&SurrogateModel> {
        self.models.iter().find(|m| m.scope == ModelScope::Global)
    }

    pub fn for_algorithm(&self, algorithm_id: u8) -> Option<&SurrogateModel> {
        self.models.iter().find(|m| m.scope == ModelScope::PerAlgorithm { algorithm_id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(m: usize) -> Vec<String> {
        (0..m).map(|i| format!("z{i}")).collect()
    }

    fn uniform_rows(n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(&[seed]);
        (0..n).map(|_| (0..m).map(|_| rng.gen::<f64>()).collect()).collect()
    }

    #[test]
    fn constant_target() {
        let x = uniform_rows(30, 3, 1);
        let d = Dataset::new(x, vec![5.0; 30], names(3)).unwrap();
        let f = fit(&d, &ForestParams { n_trees: 10, ..Default::default() }, 0).unwrap();
        for probe in uniform_rows(20, 3, 2) {
            assert_eq!(f.predict(&probe), 5.0);
        }
    }

    #[test]
    fn rejects_small_and_non_finite() {
        assert!(matches!(Dataset::new(uniform_rows(9, 2, 0), vec![0.0; 9], names(2)), Err(SurrogateError::TooFewRows(9))));
        let mut y = vec![0.0; 12];
        y[4] = f64::NAN;
        assert!(matches!(Dataset::new(uniform_rows(12, 2, 0), y, names(2)), Err(SurrogateError::NonFinite(4))));
    }

    #[test]
    fn hand_traced_two_tree_forest() {
        let t1 = Tree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2 },
                Node::Leaf { value: 1.0 },
                Node::Split { feature: 1, threshold: 0.25, left: 3, right: 4 },
                Node::Leaf { value: 2.0 },
                Node::Leaf { value: 4.0 },
            ],
        };
        let t2 = Tree {
            nodes: vec![
                Node::Split { feature: 1, threshold: 0.75, left: 1, right: 2 },
                Node::Leaf { value: -1.0 },
                Node::Leaf { value: 3.0 },
            ],
        };
        let f = ForestModel::from_trees(2, vec![t1, t2]);
        // (0.7, 0.9): t1 → right, right → 4; t2 → right → 3
        assert_eq!(f.predict(&[0.7, 0.9]), 3.5);
        // (0.5, 0.1): t1 → left (≤) → 1; t2 → left → -1
        assert_eq!(f.predict(&[0.5, 0.1]), 0.0);
        assert_eq!(ForestModel::from_trees(1, vec![Tree::leaf(3.0)]).predict(&[42.0]), 3.0);
    }

    #[test]
    fn thresholds_lie_inside_observed_range_and_depth_is_bounded() {
        let x = uniform_rows(200, 3, 4);
        let y: Vec<f64> = x.iter().map(|r| (6.0 * r[0]).sin() + r[1] * r[2]).collect();
        let d = Dataset::new(x.clone(), y, names(3)).unwrap();
        let f = fit(&d, &ForestParams { n_trees: 20, max_depth: 4, ..Default::default() }, 1).unwrap();
        for t in &f.trees {
            assert!(t.depth() <= 4);
            for n in &t.nodes {
                if let Node::Split { feature, threshold, .. } = n {
                    let lo = x.iter().map(|r| r[*feature]).fold(f64::INFINITY, f64::min);
                    let hi = x.iter().map(|r| r[*feature]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(*threshold >= lo && *threshold <= hi);
                }
            }
        }
    }

    #[test]
    fn folds_are_balanced() {
        for n in [25, 26, 99, 1000] {
            let f = fold_assignment(n, 5, 3);
            let mut counts = [0usize; 5];
            f.iter().for_each(|&k| counts[k] += 1);
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn artifact_round_trip() {
        let x = uniform_rows(40, 2, 7);
        let y: Vec<f64> = x.iter().map(|r| r[0] * 0.3 + 0.1).collect();
        let d = Dataset::new(x, y, names(2)).unwrap();
        let m =
            SurrogateModel::train(ModelScope::Global, &d, &ForestParams { n_trees: 5, ..Default::default() }, 3, true).unwrap();
        let a = ModelArtifact::new(vec![m]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        a.save(&p).unwrap();
        let b = ModelArtifact::load(&p).unwrap();
        assert_eq!(a, b);
        assert!(b.global().unwrap().fit_report.is_some());
    }
}
