//! Acting on the surrogate: pick the configurations it predicts transfer best
//! and worst, check those predictions against the sweep, and estimate how
//! sensitive a trained policy is to the physics it was trained under.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config_space::{Configuration, ConfigurationSpace, SpaceError};
use crate::envlab::{Direction, Env, EnvError, PhysicsPresets, Task};
use crate::runner::{aggregate_seeds, AggregateRecord, ExperimentRecord, N_ALGORITHMS};
use crate::shapley::{exact_shapley, Attribution, BackgroundSet, Regressor, ShapleyError};
use crate::trainers::{evaluate, Policy, TrainError};

pub const MIN_CANDIDATES: usize = 100;
pub const DEFAULT_CANDIDATES: usize = 10_000;
/// Spearman correlation expected between `S·d` and the measured gap.
pub const BOUND_CORRELATION_TARGET: f64 = 0.2;
/// Relative rounding allowance when comparing a gap with its bound.
pub const BOUND_ROUNDING_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("at least {MIN_CANDIDATES} candidates are required, got {0}")]
    TooFewCandidates(usize),
    #[error("no record uses algorithm {0}")]
    NoMatchingAlgorithm(u8),
    #[error("no records to match against")]
    NoRecords,
    #[error("delta_rel must lie in (0, 0.1], got {0}")]
    BadDelta(f64),
    #[error("no sensitivity estimate for record {0}")]
    MissingSensitivity(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Shapley(#[from] ShapleyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredConfig {
    pub candidate_index: usize,
    pub configuration: Configuration,
    pub predicted_gap: f64,
    pub attribution: Attribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub best: ScoredConfig,
    pub worst: ScoredConfig,
    pub candidate_count: usize,
    pub feature_names: Vec<String>,
}

/// Index of the smallest and largest score; ties go to the lower index.
pub fn argmin_argmax(scores: &[f64]) -> (usize, usize) {
    let (mut lo, mut hi) = (0, 0);
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < scores[lo] {
            lo = i;
        }
        if s > scores[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Random search over the sampler: each candidate picks an algorithm uniformly,
/// then its hyperparameters. `model` must take the 5-feature global encoding.
pub fn select_configurations<M: Regressor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    space: &ConfigurationSpace,
    n_candidates: usize,
    rng: &mut R,
    bg: &BackgroundSet,
) -> Result<SelectionReport, GuidanceError> {
    if n_candidates < MIN_CANDIDATES {
        return Err(GuidanceError::TooFewCandidates(n_candidates));
    }
    let mut candidates = Vec::with_capacity(n_candidates);
    for _ in 0..n_candidates {
        let alg = rng.gen_range(0..N_ALGORITHMS);
        let c = space.sample(alg, rng)?;
        candidates.push((c, space.encode(&c)?.0.to_vec()));
    }
    let scores: Vec<f64> = candidates.par_iter().map(|(_, x)| model.predict(x)).collect();
    let (lo, hi) = argmin_argmax(&scores);
    let scored = |i: usize| -> Result<ScoredConfig, GuidanceError> {
        Ok(ScoredConfig {
            candidate_index: i,
            configuration: candidates[i].0,
            predicted_gap: scores[i],
            attribution: exact_shapley(model, &candidates[i].1, bg)?,
        })
    };
    Ok(SelectionReport {
        best: scored(lo)?,
        worst: scored(hi)?,
        candidate_count: n_candidates,
        feature_names: space.global_feature_names(),
    })
}

/// Something a selected configuration can be matched against.
pub trait MatchCandidate {
    fn task(&self) -> Task;
    fn direction(&self) -> Direction;
    fn config_id(&self) -> u64;
    /// `None` for seed-averaged rows.
    fn seed(&self) -> Option<u32>;
    fn configuration(&self) -> Configuration;
    fn actual_gap(&self) -> f64;
}

impl MatchCandidate for ExperimentRecord {
    fn task(&self) -> Task {
        self.task
    }
    fn direction(&self) -> Direction {
        self.direction
    }
    fn config_id(&self) -> u64 {
        self.config_id
    }
    fn seed(&self) -> Option<u32> {
        Some(self.seed)
    }
    fn configuration(&self) -> Configuration {
        self.config()
    }
    fn actual_gap(&self) -> f64 {
        self.gap
    }
}

impl MatchCandidate for AggregateRecord {
    fn task(&self) -> Task {
        self.task
    }
    fn direction(&self) -> Direction {
        self.direction
    }
    fn config_id(&self) -> u64 {
        self.config_id
    }
    fn seed(&self) -> Option<u32> {
        None
    }
    fn configuration(&self) -> Configuration {
        self.config()
    }
    fn actual_gap(&self) -> f64 {
        self.gap
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub task: Task,
    pub direction: Direction,
    pub config_id: u64,
    pub seed: Option<u32>,
    pub configuration: Configuration,
    /// L2 distance between normalized hyperparameter slots.
    pub distance: f64,
    pub actual_gap: f64,
}

/// Closest candidate of the target's algorithm in each `(task, direction)`.
/// Ties go to the lower `config_id`, then the lower seed.
pub fn nearest_match<C: MatchCandidate>(
    target: &Configuration,
    candidates: &[C],
    space: &ConfigurationSpace,
) -> Result<Vec<MatchRow>, GuidanceError> {
    if candidates.is_empty() {
        return Err(GuidanceError::NoRecords);
    }
    let zt = space.encode(target)?.slots();
    let mut best: BTreeMap<(Task, Direction), MatchRow> = BTreeMap::new();
    for c in candidates {
        let cfg = c.configuration();
        if cfg.algorithm_id != target.algorithm_id {
            continue;
        }
        let z = space.encode(&cfg)?.slots();
        let distance = z.iter().zip(&zt).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let row = MatchRow {
            task: c.task(),
            direction: c.direction(),
            config_id: c.config_id(),
            seed: c.seed(),
            configuration: cfg,
            distance,
            actual_gap: c.actual_gap(),
        };
        let better = |cur: &MatchRow| (row.distance, row.config_id, row.seed) < (cur.distance, cur.config_id, cur.seed);
        match best.get(&(row.task, row.direction)) {
            Some(cur) if !better(cur) => {}
            _ => {
                best.insert((row.task, row.direction), row);
            }
        }
    }
    if best.is_empty() {
        return Err(GuidanceError::NoMatchingAlgorithm(target.algorithm_id));
    }
    Ok(best.into_values().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchGranularity {
    /// Match individual trials.
    Record,
    /// Match configurations with their gap averaged over seeds.
    SeedMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedMatch {
    #[serde(flatten)]
    pub row: MatchRow,
    /// Actual and predicted gap share a sign.
    pub sign_consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub granularity: MatchGranularity,
    pub best_predicted: f64,
    pub worst_predicted: f64,
    pub best_matches: Vec<ValidatedMatch>,
    pub worst_matches: Vec<ValidatedMatch>,
    pub mean_actual_best: f64,
    pub mean_actual_worst: f64,
    /// `mean_actual_best < mean_actual_worst`
    pub directional_consistent: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn validate_selection(
    selection: &SelectionReport,
    records: &[ExperimentRecord],
    space: &ConfigurationSpace,
    granularity: MatchGranularity,
) -> Result<ValidationReport, GuidanceError> {
    let matches = |target: &ScoredConfig| -> Result<Vec<ValidatedMatch>, GuidanceError> {
        let rows = match granularity {
            MatchGranularity::Record => nearest_match(&target.configuration, records, space)?,
            MatchGranularity::SeedMean => nearest_match(&target.configuration, &aggregate_seeds(records), space)?,
        };
        Ok(rows
            .into_iter()
            .map(|row| ValidatedMatch { sign_consistent: (row.actual_gap >= 0.0) == (target.predicted_gap >= 0.0), row })
            .collect())
    };
    let best_matches = matches(&selection.best)?;
    let worst_matches = matches(&selection.worst)?;
    let gaps = |v: &[ValidatedMatch]| v.iter().map(|m| m.row.actual_gap).collect::<Vec<_>>();
    let mean_actual_best = mean(&gaps(&best_matches));
    let mean_actual_worst = mean(&gaps(&worst_matches));
    Ok(ValidationReport {
        granularity,
        best_predicted: selection.best.predicted_gap,
        worst_predicted: selection.worst.predicted_gap,
        best_matches,
        worst_matches,
        mean_actual_best,
        mean_actual_worst,
        directional_consistent: mean_actual_best < mean_actual_worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityComponent {
    pub field: String,
    pub value: f64,
    /// Step actually taken on each side after clamping.
    pub delta_plus: f64,
    pub delta_minus: f64,
    /// ∂J/∂ω_k in raw units.
    pub gradient: f64,
    /// Gradient with respect to the normalized field, `gradient · scale_k`.
    pub component: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEstimate {
    /// ‖components‖₂
    pub s: f64,
    pub components: Vec<SensitivityComponent>,
    pub excluded: Vec<String>,
    pub delta_rel: f64,
    pub episodes: usize,
}

/// Central finite differences of `J(π; ω)` around the environment's own physics.
/// Every evaluation reuses `eval_seed`, so the noise is common to both sides.
pub fn estimate_sensitivity<E: Env>(
    policy: &Policy,
    env: &E,
    delta_rel: f64,
    episodes: usize,
    eval_seed: u64,
) -> Result<SensitivityEstimate, GuidanceError> {
    if !(delta_rel > 0.0 && delta_rel <= 0.1) {
        return Err(GuidanceError::BadDelta(delta_rel));
    }
    let omega = env.physics();
    let names = omega.field_names();
    let scales = omega.normalization_scales();
    let values = omega.values();
    let mut components = Vec::new();
    let mut excluded = Vec::new();
    for k in 0..values.len() {
        if omega.is_discrete(k) {
            excluded.push(names[k].clone());
            continue;
        }
        let v = values[k];
        let delta = if v != 0.0 { delta_rel * v.abs() } else { delta_rel };
        let plus = omega.clamp_value(k, v + delta);
        let minus = omega.clamp_value(k, v - delta);
        let clamped = plus != v + delta || minus != v - delta;
        if clamped {
            log::warn!("{}: perturbation clamped to [{minus}, {plus}]", names[k]);
        }
        let gradient = if plus > minus {
            let mut ep = env.with_physics(&omega.with_value(k, plus))?;
            let mut em = env.with_physics(&omega.with_value(k, minus))?;
            let jp = evaluate(policy, &mut ep, episodes, eval_seed)?;
            let jm = evaluate(policy, &mut em, episodes, eval_seed)?;
            (jp - jm) / (plus - minus)
        } else {
            0.0
        };
        components.push(SensitivityComponent {
            field: names[k].clone(),
            value: v,
            delta_plus: plus - v,
            delta_minus: v - minus,
            gradient,
            component: gradient * scales[k],
            clamped,
        });
    }
    let s = components.iter().map(|c| c.component * c.component).sum::<f64>().sqrt();
    Ok(SensitivityEstimate { s, components, excluded, delta_rel, episodes })
}

/// A sensitivity estimate tied to the trial whose policy it describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub record_id: String,
    pub task: Task,
    pub direction: Direction,
    pub config_id: u64,
    pub seed: u32,
    pub estimate: SensitivityEstimate,
}

/// One trial as seen by the bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInput {
    pub record_id: String,
    /// Trials are compared for ε_opt only within a group.
    pub group: String,
    pub j_source: f64,
    pub gap: f64,
    pub sensitivity: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub record_id: String,
    pub group: String,
    pub gap: f64,
    pub sensitivity: f64,
    pub distance: f64,
    pub eps_opt: f64,
    /// `sensitivity · distance + eps_opt`
    pub bound: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
    pub satisfied_fraction: f64,
    /// Spearman correlation between `S·d` and the measured gap; absent when
    /// either side is constant or fewer than two rows exist.
    pub spearman: Option<f64>,
    pub correlation_target: f64,
    pub correlation_ok: bool,
}

/// Pairs each record with its sensitivity and its task's physics distance.
pub fn bound_inputs(
    records: &[ExperimentRecord],
    sensitivities: &[SensitivityRecord],
    presets: &PhysicsPresets,
) -> Result<Vec<BoundInput>, GuidanceError> {
    let by_id: BTreeMap<&str, &SensitivityRecord> = sensitivities.iter().map(|s| (s.record_id.as_str(), s)).collect();
    records
        .iter()
        .map(|r| {
            let id = r.record_id();
            let s = by_id.get(id.as_str()).ok_or_else(|| GuidanceError::MissingSensitivity(id.clone()))?;
            Ok(BoundInput {
                group: format!("{}:{}", r.task, r.direction),
                record_id: id,
                j_source: r.j_source,
                gap: r.gap,
                sensitivity: s.estimate.s,
                distance: presets.distance(r.task),
            })
        })
        .collect()
}

/// ε_opt is the best source return in the record's group minus its own.
pub fn check_bound(inputs: &[BoundInput]) -> BoundReport {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for i in inputs {
        let e = best.entry(i.group.as_str()).or_insert(f64::NEG_INFINITY);
        *e = e.max(i.j_source);
    }
    let rows: Vec<BoundRow> = inputs
        .iter()
        .map(|i| {
            let eps_opt = best[i.group.as_str()] - i.j_source;
            let bound = i.sensitivity * i.distance + eps_opt;
            BoundRow {
                record_id: i.record_id.clone(),
                group: i.group.clone(),
                gap: i.gap,
                sensitivity: i.sensitivity,
                distance: i.distance,
                eps_opt,
                bound,
                satisfied: i.gap <= bound + BOUND_ROUNDING_TOL * bound.abs().max(1.0),
            }
        })
        .collect();
    let sd: Vec<f64> = rows.iter().map(|r| r.sensitivity * r.distance).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    let spearman = spearman(&sd, &gaps);
    let satisfied_fraction =
        if rows.is_empty() { 0.0 } else { rows.iter().filter(|r| r.satisfied).count() as f64 / rows.len() as f64 };
    BoundReport {
        rows,
        satisfied_fraction,
        spearman,
        correlation_target: BOUND_CORRELATION_TARGET,
        correlation_ok: spearman.is_some_and(|r| r >= BOUND_CORRELATION_TARGET),
    }
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}
