//! Analysis tables, polynomial dependence trends, vector plots and the
//! end-to-end pipeline.
//!
//! Tables are the primary artifacts. Plots are rendered from the table files,
//! never from in-memory state.

pub mod pipeline;
pub mod svg;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envlab::{Direction, Task};
use crate::runner::ExperimentRecord;
use crate::shapley::{Attribution, InteractionMatrix};

pub const DEFAULT_DEGREE: usize = 2;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{0} record ids for {1} attributions")]
    CountMismatch(usize, usize),
    #[error("record id {0} is not in the results file")]
    UnknownRecord(String),
    #[error("need at least 3 points for a dependence fit, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Attributions of a batch of records under one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedSet {
    /// `global` or the algorithm name.
    pub scope: String,
    pub feature_names: Vec<String>,
    pub record_ids: Vec<String>,
    pub attributions: Vec<Attribution>,
}

impl ExplainedSet {
    fn check(&self, known: Option<&BTreeSet<String>>) -> Result<(), ReportError> {
        if self.record_ids.len() != self.attributions.len() {
            return Err(ReportError::CountMismatch(self.record_ids.len(), self.attributions.len()));
        }
        if let Some(known) = known {
            if let Some(id) = self.record_ids.iter().find(|id| !known.contains(*id)) {
                return Err(ReportError::UnknownRecord(id.clone()));
            }
        }
        Ok(())
    }
}

fn known_ids(records: &[ExperimentRecord]) -> BTreeSet<String> {
    records.iter().map(|r| r.record_id()).collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, ReportError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    // headers are written explicitly so empty tables still carry them
    Ok(csv::WriterBuilder::new().has_headers(false).from_path(path)?)
}

/// Long-format attribution table:
/// `scope, record_id, feature, feature_value, shap_value, base_value`.
pub fn emit_attributions(sets: &[ExplainedSet], path: &Path) -> Result<usize, ReportError> {
    let mut w = csv_writer(path)?;
    w.write_record(["scope", "record_id", "feature", "feature_value", "shap_value", "base_value"])?;
    let mut n = 0;
    for set in sets {
        set.check(None)?;
        for (id, a) in set.record_ids.iter().zip(&set.attributions) {
            for (k, name) in set.feature_names.iter().enumerate() {
                w.serialize((&set.scope, id, name, a.x[k], a.phi[k], a.base_value))?;
                n += 1;
            }
        }
    }
    w.flush()?;
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeeswarmRow {
    pub record_id: String,
    pub feature: String,
    pub feature_value: f64,
    pub shap_value: f64,
}

/// Rows sorted by feature (in model order), then shap value, then record id.
pub fn beeswarm_rows(set: &ExplainedSet, records: &[ExperimentRecord]) -> Result<Vec<BeeswarmRow>, ReportError> {
    set.check(Some(&known_ids(records)))?;
    let mut rows: Vec<(usize, BeeswarmRow)> = Vec::with_capacity(set.attributions.len() * set.feature_names.len());
    for (id, a) in set.record_ids.iter().zip(&set.attributions) {
        for (k, name) in set.feature_names.iter().enumerate() {
            rows.push((
                k,
                BeeswarmRow { record_id: id.clone(), feature: name.clone(), feature_value: a.x[k], shap_value: a.phi[k] },
            ));
        }
    }
    rows.sort_by(|(ka, a), (kb, b)| {
        ka.cmp(kb).then(a.shap_value.total_cmp(&b.shap_value)).then_with(|| a.record_id.cmp(&b.record_id))
    });
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn emit_beeswarm_data(set: &ExplainedSet, records: &[ExperimentRecord], path: &Path) -> Result<usize, ReportError> {
    let rows = beeswarm_rows(set, records)?;
    let mut w = csv_writer(path)?;
    w.write_record(["record_id", "feature", "feature_value", "shap_value"])?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows.len())
}

pub fn read_beeswarm(path: &Path) -> Result<Vec<BeeswarmRow>, ReportError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Instance-averaged interaction matrices of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSummary {
    pub scope: String,
    pub feature_names: Vec<String>,
    pub mean_signed: Vec<Vec<f64>>,
    pub mean_abs: Vec<Vec<f64>>,
    pub n_instances: usize,
}

impl InteractionSummary {
    pub fn from_matrices(scope: &str, feature_names: &[String], matrices: &[InteractionMatrix]) -> Self {
        let m = feature_names.len();
        let mut signed = vec![vec![0.0; m]; m];
        let mut abs = vec![vec![0.0; m]; m];
        for mat in matrices {
            for i in 0..m {
                for j in 0..m {
                    signed[i][j] += mat.values[i][j];
                    abs[i][j] += mat.values[i][j].abs();
                }
            }
        }
        let n = matrices.len().max(1) as f64;
        for row in signed.iter_mut().chain(abs.iter_mut()) {
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self {
            scope: scope.to_string(),
            feature_names: feature_names.to_vec(),
            mean_signed: signed,
            mean_abs: abs,
            n_instances: matrices.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRow {
    pub scope: String,
    pub feature_i: String,
    pub feature_j: String,
    pub mean_abs_interaction: f64,
    pub mean_signed_interaction: f64,
}

/// Upper triangle, diagonal included, of each summary.
pub fn interaction_rows(summaries: &[InteractionSummary]) -> Vec<InteractionRow> {
    let mut rows = Vec::new();
    for s in summaries {
        let m = s.feature_names.len();
        for i in 0..m {
            for j in i..m {
                rows.push(InteractionRow {
                    scope: s.scope.clone(),
                    feature_i: s.feature_names[i].clone(),
                    feature_j: s.feature_names[j].clone(),
                    mean_abs_interaction: s.mean_abs[i][j],
                    mean_signed_interaction: s.mean_signed[i][j],
                });
            }
        }
    }
    rows
}

pub fn emit_interaction_matrix(summaries: &[InteractionSummary], path: &Path) -> Result<usize, ReportError> {
    let rows = interaction_rows(summaries);
    let mut w = csv_writer(path)?;
    w.write_record(["scope", "feature_i", "feature_j", "mean_abs_interaction", "mean_signed_interaction"])?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows.len())
}

pub fn read_interactions(path: &Path) -> Result<Vec<InteractionRow>, ReportError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Least-squares polynomial, coefficients in increasing order of power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub degree: usize,
    pub coefficients: Vec<f64>,
    /// Sum of squared residuals.
    pub residual: f64,
    /// Too few distinct x values for the requested degree; a constant was fitted.
    pub rank_deficient: bool,
}

impl PolyFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// Solves the normal equations `AᵀA c = Aᵀy` for a Vandermonde `A`.
pub fn fit_polynomial(x: &[f64], y: &[f64], degree: usize) -> Result<PolyFit, ReportError> {
    if x.len() < 3 || x.len() != y.len() {
        return Err(ReportError::TooFewPoints(x.len().min(y.len())));
    }
    let distinct: BTreeSet<u64> = x.iter().map(|v| v.to_bits()).collect();
    let solved = if distinct.len() > degree {
        let a = DMatrix::from_fn(x.len(), degree + 1, |r, c| x[r].powi(c as i32));
        let at = a.transpose();
        (&at * &a).cholesky().map(|ch| ch.solve(&(&at * DVector::from_column_slice(y))))
    } else {
        None
    };
    let (coefficients, rank_deficient) = match solved {
        Some(c) => (c.iter().copied().collect(), false),
        None => {
            let mut c = vec![0.0; degree + 1];
            c[0] = y.iter().sum::<f64>() / y.len() as f64;
            (c, true)
        }
    };
    let mut fit = PolyFit { degree, coefficients, residual: 0.0, rank_deficient };
    fit.residual = x.iter().zip(y).map(|(&xi, &yi)| (yi - fit.eval(xi)).powi(2)).sum();
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencePoint {
    pub record_id: String,
    pub raw_value: f64,
    pub normalized_value: f64,
    pub shap_value: f64,
}

/// Shap value of one feature against its value, with a polynomial trend over
/// the normalized value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceSeries {
    pub scope: String,
    pub task: Task,
    pub direction: Direction,
    pub feature: String,
    pub points: Vec<DependencePoint>,
    pub fit: PolyFit,
}

pub fn fit_dependence(
    scope: &str,
    task: Task,
    direction: Direction,
    feature: &str,
    points: Vec<DependencePoint>,
    degree: usize,
) -> Result<DependenceSeries, ReportError> {
    let x: Vec<f64> = points.iter().map(|p| p.normalized_value).collect();
    let y: Vec<f64> = points.iter().map(|p| p.shap_value).collect();
    let fit = fit_polynomial(&x, &y, degree)?;
    Ok(DependenceSeries { scope: scope.to_string(), task, direction, feature: feature.to_string(), points, fit })
}

/// Dependence series for `features` of a per-algorithm set, one per
/// `(task, direction)` present among its records. Groups with fewer than 3
/// points are skipped.
pub fn dependence_by_group(
    set: &ExplainedSet,
    records: &[ExperimentRecord],
    features: &[&str],
    degree: usize,
) -> Result<Vec<DependenceSeries>, ReportError> {
    set.check(Some(&known_ids(records)))?;
    let by_id: BTreeMap<String, &ExperimentRecord> = records.iter().map(|r| (r.record_id(), r)).collect();
    let mut out = Vec::new();
    for feature in features {
        let Some(k) = set.feature_names.iter().position(|n| n == feature) else {
            continue;
        };
        let mut groups: BTreeMap<(Task, Direction), Vec<DependencePoint>> = BTreeMap::new();
        for (id, a) in set.record_ids.iter().zip(&set.attributions) {
            let r = by_id[id];
            groups.entry((r.task, r.direction)).or_default().push(DependencePoint {
                record_id: id.clone(),
                raw_value: r.config().values[k],
                normalized_value: a.x[k],
                shap_value: a.phi[k],
            });
        }
        for ((task, direction), points) in groups {
            if points.len() >= 3 {
                out.push(fit_dependence(&set.scope, task, direction, feature, points, degree)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DependencePointRow<'a> {
    scope: &'a str,
    task: Task,
    direction: Direction,
    feature: &'a str,
    record_id: &'a str,
    raw_value: f64,
    normalized_value: f64,
    shap_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceFitRow {
    pub scope: String,
    pub task: Task,
    pub direction: Direction,
    pub feature: String,
    pub n_points: usize,
    pub degree: usize,
    /// Space-separated, increasing power.
    pub coefficients: String,
    pub residual: f64,
    pub rank_deficient: bool,
}

/// Writes `dependence.csv` (points) and `dependence_fit.csv` (trends).
pub fn emit_dependence(series: &[DependenceSeries], points_path: &Path, fits_path: &Path) -> Result<(), ReportError> {
    let mut w = csv_writer(points_path)?;
    w.write_record(["scope", "task", "direction", "feature", "record_id", "raw_value", "normalized_value", "shap_value"])?;
    for s in series {
        for p in &s.points {
            w.serialize(DependencePointRow {
                scope: &s.scope,
                task: s.task,
                direction: s.direction,
                feature: &s.feature,
                record_id: &p.record_id,
                raw_value: p.raw_value,
                normalized_value: p.normalized_value,
                shap_value: p.shap_value,
            })?;
        }
    }
    w.flush()?;
    let mut w = csv_writer(fits_path)?;
    w.write_record([
        "scope",
        "task",
        "direction",
        "feature",
        "n_points",
        "degree",
        "coefficients",
        "residual",
        "rank_deficient",
    ])?;
    for s in series {
        w.serialize(DependenceFitRow {
            scope: s.scope.clone(),
            task: s.task,
            direction: s.direction,
            feature: s.feature.clone(),
            n_points: s.points.len(),
            degree: s.fit.degree,
            coefficients: s.fit.coefficients.iter().map(|c| format!("{c:e}")).collect::<Vec<_>>().join(" "),
            residual: s.fit.residual,
            rank_deficient: s.fit.rank_deficient,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceTableRow {
    pub scope: String,
    pub task: Task,
    pub direction: Direction,
    pub feature: String,
    pub record_id: String,
    pub raw_value: f64,
    pub normalized_value: f64,
    pub shap_value: f64,
}

pub fn read_dependence(
    points_path: &Path,
    fits_path: &Path,
) -> Result<(Vec<DependenceTableRow>, Vec<DependenceFitRow>), ReportError> {
    let points = csv::Reader::from_path(points_path)?.deserialize().collect::<Result<_, _>>()?;
    let fits = csv::Reader::from_path(fits_path)?.deserialize().collect::<Result<_, _>>()?;
    Ok((points, fits))
}
