//! run → fit → explain → select → validate → (sensitivity → bound) → report.
//!
//! Every stage reads the previous stage's files from the output directory, so
//! a bundle can be audited or resumed stage by stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    dependence_by_group, emit_attributions, emit_beeswarm_data, emit_dependence, emit_interaction_matrix, read_beeswarm,
    read_dependence, read_interactions, svg, ExplainedSet, InteractionSummary, DEFAULT_DEGREE,
};
use crate::config_space::{load_space, ConfigurationSpace};
use crate::envlab::{make_env, PhysicsPresets};
use crate::guidance::{
    bound_inputs, check_bound, estimate_sensitivity, select_configurations, validate_selection, BoundReport, MatchGranularity,
    SelectionReport, SensitivityRecord, ValidationReport, DEFAULT_CANDIDATES,
};
use crate::runner::{read_records, retrain_policy, run_experiments, ExperimentRecord, RunOptions, RunSpec, TrialSeeds};
use crate::seed::{derive_seed, rng_from, Stage};
use crate::shapley::{batch_explain, batch_interactions, BackgroundSet, DEFAULT_BACKGROUND_SIZE};
use crate::surrogate::{Dataset, ForestParams, ModelArtifact, ModelScope, SurrogateModel};

pub const MANIFEST_VERSION: u32 = 1;

pub const RUNS_FILE: &str = "runs.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const ATTRIBUTIONS_FILE: &str = "attributions.csv";
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const DEPENDENCE_FILE: &str = "dependence.csv";
pub const DEPENDENCE_FIT_FILE: &str = "dependence_fit.csv";
pub const SELECTION_FILE: &str = "selection.json";
pub const VALIDATION_FILE: &str = "validation.json";
pub const SENSITIVITY_FILE: &str = "sens.jsonl";
pub const BOUND_FILE: &str = "bound.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

fn stage<T, E: std::fmt::Display>(name: &'static str, r: Result<T, E>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError { stage: name, message: e.to_string() })
}

/// Everything that determines a bundle's contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Bundled default space when absent.
    pub space_path: Option<PathBuf>,
    /// Bundled presets when absent.
    pub physics_path: Option<PathBuf>,
    pub run: RunSpec,
    pub forest: ForestParams,
    pub background_size: usize,
    pub candidates: usize,
    pub granularity: MatchGranularity,
    pub degree: usize,
    /// Retrain every policy and estimate its physics sensitivity.
    pub sensitivity: bool,
    pub delta_rel: f64,
    pub sensitivity_episodes: usize,
    #[serde(default)]
    pub shap_range: Option<(f64, f64)>,
}

impl PipelineConfig {
    pub fn new(run: RunSpec) -> Self {
        Self {
            space_path: None,
            physics_path: None,
            run,
            forest: ForestParams::default(),
            background_size: DEFAULT_BACKGROUND_SIZE,
            candidates: DEFAULT_CANDIDATES,
            granularity: MatchGranularity::SeedMean,
            degree: DEFAULT_DEGREE,
            sensitivity: false,
            delta_rel: 0.01,
            sensitivity_episodes: 20,
            shap_range: None,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.run.master_seed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub config: PipelineConfig,
    /// Seeds derived from the master seed for each stage.
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<ArtifactEntry>,
    /// SHA-256 over the artifact hashes in path order.
    pub bundle_hash: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = stage("manifest", fs::read_to_string(path))?;
        stage("manifest", serde_json::from_str(&text))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn fit_seed(master_seed: u64, scope: ModelScope) -> u64 {
    let code = match scope {
        ModelScope::Global => 0,
        ModelScope::PerAlgorithm { algorithm_id } => 1 + algorithm_id as u64,
    };
    derive_seed(&[master_seed, Stage::Fit as u64, code])
}

pub fn background_seed(master_seed: u64, scope: ModelScope) -> u64 {
    derive_seed(&[fit_seed(master_seed, scope), Stage::Background as u64])
}

pub fn selection_seed(master_seed: u64) -> u64 {
    derive_seed(&[master_seed, Stage::Select as u64])
}

pub fn load_inputs(space: Option<&Path>, physics: Option<&Path>) -> Result<(ConfigurationSpace, PhysicsPresets), PipelineError> {
    let space = match space {
        Some(p) => stage("space", load_space(p))?,
        None => ConfigurationSpace::default_space(),
    };
    stage("space", space.validate())?;
    let presets = match physics {
        Some(p) => stage("space", PhysicsPresets::load(p))?,
        None => PhysicsPresets::bundled(),
    };
    Ok((space, presets))
}

/// Global model plus one model per algorithm with records.
pub fn fit_models(
    records: &[ExperimentRecord],
    space: &ConfigurationSpace,
    params: &ForestParams,
    master_seed: u64,
) -> Result<ModelArtifact, PipelineError> {
    fit_scopes(records, space, params, master_seed, true, true)
}

/// Like [`fit_models`] with either family of models left out.
pub fn fit_scopes(
    records: &[ExperimentRecord],
    space: &ConfigurationSpace,
    params: &ForestParams,
    master_seed: u64,
    global: bool,
    per_algorithm: bool,
) -> Result<ModelArtifact, PipelineError> {
    let mut models = Vec::new();
    if global {
        let data = stage("fit", Dataset::global(records, space))?;
        models.push(stage(
            "fit",
            SurrogateModel::train(ModelScope::Global, &data, params, fit_seed(master_seed, ModelScope::Global), true),
        )?);
    }
    for alg in space.algorithms.iter().filter(|_| per_algorithm) {
        let scope = ModelScope::PerAlgorithm { algorithm_id: alg.algorithm_id };
        if !records.iter().any(|r| r.algorithm_id == alg.algorithm_id) {
            continue;
        }
        let data = stage("fit", Dataset::per_algorithm(records, space, alg.algorithm_id))?;
        models.push(stage("fit", SurrogateModel::train(scope, &data, params, fit_seed(master_seed, scope), true))?);
    }
    Ok(ModelArtifact::new(models))
}

pub fn background_for(model: &SurrogateModel, size: usize, master_seed: u64) -> Result<BackgroundSet, PipelineError> {
    stage("explain", BackgroundSet::sample(&model.forest, &model.training_x, size, background_seed(master_seed, model.scope)))
}

pub fn scope_label(space: &ConfigurationSpace, scope: ModelScope) -> String {
    match scope {
        ModelScope::Global => "global".into(),
        ModelScope::PerAlgorithm { algorithm_id } => {
            space.algorithm(algorithm_id).map(|a| a.name.clone()).unwrap_or_else(|_| format!("alg{algorithm_id}"))
        }
    }
}

/// Exact attributions and interaction summaries of each per-algorithm model
/// over its own training records.
pub fn explain_models(
    artifact: &ModelArtifact,
    space: &ConfigurationSpace,
    background_size: usize,
    master_seed: u64,
) -> Result<(Vec<ExplainedSet>, Vec<InteractionSummary>), PipelineError> {
    let mut sets = Vec::new();
    let mut summaries = Vec::new();
    for model in artifact.models.iter().filter(|m| m.scope != ModelScope::Global) {
        let bg = background_for(model, background_size, master_seed)?;
        let label = scope_label(space, model.scope);
        let attributions = stage("explain", batch_explain(&model.forest, &model.training_x, &bg))?;
        let matrices = stage("interact", batch_interactions(&model.forest, &model.training_x, &bg))?;
        summaries.push(InteractionSummary::from_matrices(&label, &model.feature_names, &matrices));
        sets.push(ExplainedSet {
            scope: label,
            feature_names: model.feature_names.clone(),
            record_ids: model.training_ids.clone(),
            attributions,
        });
    }
    Ok((sets, summaries))
}

pub fn select_with(
    artifact: &ModelArtifact,
    space: &ConfigurationSpace,
    candidates: usize,
    background_size: usize,
    master_seed: u64,
) -> Result<SelectionReport, PipelineError> {
    let global =
        artifact.global().ok_or_else(|| PipelineError { stage: "select", message: "model file has no global model".into() })?;
    let bg = background_for(global, background_size, master_seed)?;
    let mut rng = rng_from(&[selection_seed(master_seed)]);
    stage("select", select_configurations(&global.forest, space, candidates, &mut rng, &bg))
}

/// Retrains each record's policy and estimates its sensitivity in the source domain.
pub fn sensitivities(
    records: &[ExperimentRecord],
    run: &RunSpec,
    presets: &PhysicsPresets,
    delta_rel: f64,
    episodes: usize,
) -> Result<Vec<SensitivityRecord>, PipelineError> {
    use rayon::prelude::*;
    records
        .par_iter()
        .map(|r| {
            let (policy, _) = stage("sensitivity", retrain_policy(r, run.master_seed, &run.budget, presets))?;
            let env = stage("sensitivity", make_env(r.task, r.direction.source(), presets, None))?;
            let seeds = TrialSeeds::derive(run.master_seed, r.task, r.direction, r.algorithm_id, r.config_id, r.seed);
            let estimate = stage("sensitivity", estimate_sensitivity(&policy, &env, delta_rel, episodes, seeds.eval))?;
            Ok(SensitivityRecord {
                record_id: r.record_id(),
                task: r.task,
                direction: r.direction,
                config_id: r.config_id,
                seed: r.seed,
                estimate,
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, stage_name: &'static str) -> Result<(), PipelineError> {
    let text = stage(stage_name, serde_json::to_string_pretty(value))?;
    stage(stage_name, fs::write(path, text + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage_name: &'static str) -> Result<T, PipelineError> {
    let text = stage(stage_name, fs::read_to_string(path))?;
    stage(stage_name, serde_json::from_str(&text))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T], stage_name: &'static str) -> Result<(), PipelineError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&stage(stage_name, serde_json::to_string(r))?);
        out.push('\n');
    }
    stage(stage_name, fs::write(path, out))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, stage_name: &'static str) -> Result<Vec<T>, PipelineError> {
    let text = stage(stage_name, fs::read_to_string(path))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| stage(stage_name, serde_json::from_str(l))).collect()
}

pub fn beeswarm_file(scope: &str) -> String {
    format!("beeswarm_{scope}.csv")
}

/// Writes the analysis tables of the explain stage.
pub fn write_explain_tables(
    dir: &Path,
    sets: &[ExplainedSet],
    summaries: &[InteractionSummary],
    records: &[ExperimentRecord],
    degree: usize,
) -> Result<(), PipelineError> {
    stage("explain", emit_attributions(sets, &dir.join(ATTRIBUTIONS_FILE)))?;
    let mut series = Vec::new();
    for set in sets {
        stage("explain", emit_beeswarm_data(set, records, &dir.join(beeswarm_file(&set.scope))))?;
        series.extend(stage("explain", dependence_by_group(set, records, &["learning_rate", "gamma"], degree))?);
    }
    stage("interact", emit_interaction_matrix(summaries, &dir.join(INTERACTIONS_FILE)))?;
    stage("explain", emit_dependence(&series, &dir.join(DEPENDENCE_FILE), &dir.join(DEPENDENCE_FIT_FILE)))
}

/// Renders one SVG per table found in `dir`. Returns the files written.
/// `shap_range` pins the beeswarm x axis; plots auto-range otherwise.
pub fn render_plots(dir: &Path, scopes: &[String], shap_range: Option<(f64, f64)>) -> Result<Vec<PathBuf>, PipelineError> {
    let plots = dir.join("plots");
    stage("report", fs::create_dir_all(&plots))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<(), PipelineError> {
        let p = plots.join(name);
        stage("report", fs::write(&p, body))?;
        written.push(p);
        Ok(())
    };
    for scope in scopes {
        let path = dir.join(beeswarm_file(scope));
        if path.exists() {
            let rows = stage("report", read_beeswarm(&path))?;
            put(format!("beeswarm_{scope}.svg"), svg::beeswarm(&rows, &format!("shap values: {scope}"), shap_range))?;
        }
    }
    let inter = dir.join(INTERACTIONS_FILE);
    if inter.exists() {
        let rows = stage("report", read_interactions(&inter))?;
        for scope in scopes {
            if rows.iter().any(|r| &r.scope == scope) {
                put(format!("interactions_{scope}.svg"), svg::interaction_heatmap(&rows, scope))?;
            }
        }
    }
    let (dp, df) = (dir.join(DEPENDENCE_FILE), dir.join(DEPENDENCE_FIT_FILE));
    if dp.exists() && df.exists() {
        let (points, fits) = stage("report", read_dependence(&dp, &df))?;
        for fit in &fits {
            let pts: Vec<_> = points
                .iter()
                .filter(|p| {
                    p.scope == fit.scope && p.task == fit.task && p.direction == fit.direction && p.feature == fit.feature
                })
                .cloned()
                .collect();
            let tag = format!("{}_{}_{}_{}", fit.scope, fit.task, fit.direction.code(), fit.feature);
            let title = format!("{} {} {} {}", fit.scope, fit.task, fit.direction, fit.feature);
            put(format!("dependence_{tag}.svg"), svg::dependence(&pts, Some(fit), &title))?;
        }
    }
    let val = dir.join(VALIDATION_FILE);
    if val.exists() {
        let v: ValidationReport = read_json(&val, "report")?;
        let labels: Vec<String> = v.best_matches.iter().map(|m| format!("{} {}", m.row.task, m.row.direction)).collect();
        let best: Vec<f64> = v.best_matches.iter().map(|m| m.row.actual_gap).collect();
        let worst: Vec<f64> = v.worst_matches.iter().map(|m| m.row.actual_gap).collect();
        put("validation.svg".into(), svg::validation_bars(&labels, &best, &worst))?;
    }
    Ok(written)
}

fn relative(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Hashes every artifact under `dir` except the manifest itself.
pub fn hash_bundle(dir: &Path) -> Result<(Vec<ArtifactEntry>, String), PipelineError> {
    fn walk(d: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(d)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    stage("report", walk(dir, &mut files))?;
    let mut entries: Vec<ArtifactEntry> = Vec::new();
    for f in files {
        let rel = relative(dir, &f);
        if rel == MANIFEST_FILE || rel.ends_with(".tmp") {
            continue;
        }
        entries.push(ArtifactEntry { path: rel, sha256: sha256_hex(&stage("report", fs::read(&f))?) });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let mut h = Sha256::new();
    for e in &entries {
        h.update(e.path.as_bytes());
        h.update(b"\0");
        h.update(e.sha256.as_bytes());
        h.update(b"\n");
    }
    let bundle = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok((entries, bundle))
}

/// Runs every stage into `out_dir` and writes the manifest last.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path, workers: usize) -> Result<Manifest, PipelineError> {
    // inputs are checked before anything is written
    let (space, presets) = load_inputs(config.space_path.as_deref(), config.physics_path.as_deref())?;
    stage("run", config.run.validate())?;
    stage("run", fs::create_dir_all(out_dir))?;
    let master = config.master_seed();

    log::info!("stage run: {} trials", config.run.expected_records());
    let runs = out_dir.join(RUNS_FILE);
    let store =
        stage("run", run_experiments(&config.run, &space, &presets, &runs, RunOptions { workers, record_timing: false }))?;
    let records = store.records().to_vec();

    log::info!("stage fit");
    let artifact = fit_models(&records, &space, &config.forest, master)?;
    stage("fit", artifact.save(&out_dir.join(MODEL_FILE)))?;

    log::info!("stage explain");
    let (sets, summaries) = explain_models(&artifact, &space, config.background_size, master)?;
    write_explain_tables(out_dir, &sets, &summaries, &records, config.degree)?;

    log::info!("stage select");
    let selection = select_with(&artifact, &space, config.candidates, config.background_size, master)?;
    write_json(&out_dir.join(SELECTION_FILE), &selection, "select")?;

    log::info!("stage validate");
    let validation = stage("validate", validate_selection(&selection, &records, &space, config.granularity))?;
    write_json(&out_dir.join(VALIDATION_FILE), &validation, "validate")?;

    if config.sensitivity {
        log::info!("stage sensitivity");
        let sens = sensitivities(&records, &config.run, &presets, config.delta_rel, config.sensitivity_episodes)?;
        write_jsonl(&out_dir.join(SENSITIVITY_FILE), &sens, "sensitivity")?;
        let inputs = stage("bound", bound_inputs(&records, &sens, &presets))?;
        let bound: BoundReport = check_bound(&inputs);
        write_json(&out_dir.join(BOUND_FILE), &bound, "bound")?;
    }

    log::info!("stage report");
    let scopes: Vec<String> = sets.iter().map(|s| s.scope.clone()).collect();
    render_plots(out_dir, &scopes, config.shap_range)?;
    let (artifacts, bundle_hash) = hash_bundle(out_dir)?;
    let mut seeds = BTreeMap::new();
    seeds.insert("master".to_string(), master);
    seeds.insert("select".to_string(), selection_seed(master));
    for m in &artifact.models {
        let label = scope_label(&space, m.scope);
        seeds.insert(format!("fit:{label}"), fit_seed(master, m.scope));
        seeds.insert(format!("background:{label}"), background_seed(master, m.scope));
    }
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        seeds,
        artifacts,
        bundle_hash,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest, "report")?;
    Ok(manifest)
}

/// Loads previously written stage outputs for commands that run a single stage.
pub fn load_records(path: &Path) -> Result<Vec<ExperimentRecord>, PipelineError> {
    stage("load", read_records(path))
}
