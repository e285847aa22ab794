//! Configuration sweeps: sample, train on the source variant, evaluate on both
//! variants, persist one record per trial.
//!
//! Per-cell random streams come from [`crate::seed::derive_seed`] over
//! `(master_seed, task, direction, algorithm_id, config_index | config_id, seed, stage)`,
//! so results do not depend on scheduling. The results file is rewritten in
//! canonical key order when a sweep closes, making reruns byte-identical for
//! any worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config_space::{Configuration, ConfigurationSpace, SpaceError, N_SLOTS};
use crate::envlab::{make_env, Direction, EnvError, PhysicsPresets, Task};
use crate::numfmt::sig17;
use crate::seed::{derive_seed, rng_from, Stage};
use crate::trainers::{evaluate, train, Policy, TrainBudget, TrainError};

pub const N_ALGORITHMS: u8 = 4;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("results file I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("results file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record key {0}")]
    DuplicateKey(String),
    #[error("non-finite return (J_source = {j_source}, J_target = {j_target})")]
    NonFinite { j_source: f64, j_target: f64 },
    #[error("invalid run spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// ΔJ = J_source − J_target. Positive means the policy does worse in the target domain.
pub fn compute_gap(j_source: f64, j_target: f64) -> Result<f64, RunError> {
    if !(j_source.is_finite() && j_target.is_finite()) {
        return Err(RunError::NonFinite { j_source, j_target });
    }
    Ok(j_source - j_target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub tasks: Vec<Task>,
    pub directions: Vec<Direction>,
    pub n_configs_per_algorithm: usize,
    pub seeds_per_config: usize,
    pub budget: TrainBudget,
    pub master_seed: u64,
}

impl RunSpec {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::InvalidSpec(m.to_string()));
        if self.tasks.is_empty() {
            return bad("at least one task is required");
        }
        if self.directions.is_empty() {
            return bad("at least one direction is required");
        }
        if self.n_configs_per_algorithm == 0 || self.seeds_per_config == 0 {
            return bad("configuration and seed counts must be >= 1");
        }
        if self.budget.total_env_steps == 0 || self.budget.eval_episodes == 0 {
            return bad("budget steps and evaluation episodes must be >= 1");
        }
        Ok(())
    }

    pub fn expected_records(&self) -> usize {
        self.tasks.len() * self.directions.len() * N_ALGORITHMS as usize * self.n_configs_per_algorithm * self.seeds_per_config
    }
}

/// One trained-and-transferred trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_id: u64,
    pub algorithm_id: u8,
    pub task: Task,
    pub direction: Direction,
    pub seed: u32,
    pub hp1: f64,
    pub hp2: f64,
    pub hp3: f64,
    pub hp4: f64,
    #[serde(rename = "J_source")]
    pub j_source: f64,
    #[serde(rename = "J_target")]
    pub j_target: f64,
    pub gap: f64,
    pub diverged: bool,
    pub wall_time: f64,
}

pub type RecordKey = (Task, Direction, u64, u32);

impl ExperimentRecord {
    pub fn key(&self) -> RecordKey {
        (self.task, self.direction, self.config_id, self.seed)
    }

    /// Stable identifier used by every exported table.
    pub fn record_id(&self) -> String {
        format!("{}:{}:{}:{}", self.task, self.direction, self.config_id, self.seed)
    }

    pub fn config(&self) -> Configuration {
        Configuration { algorithm_id: self.algorithm_id, values: [self.hp1, self.hp2, self.hp3, self.hp4] }
    }

    /// Flat JSON object, reals with 17 significant digits, fixed field order.
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"config_id\":{},\"algorithm_id\":{},\"task\":\"{}\",\"direction\":\"{}\",\"seed\":{},\
             \"hp1\":{},\"hp2\":{},\"hp3\":{},\"hp4\":{},\"J_source\":{},\"J_target\":{},\"gap\":{},\
             \"diverged\":{},\"wall_time\":{}}}",
            self.config_id,
            self.algorithm_id,
            self.task,
            self.direction,
            self.seed,
            sig17(self.hp1),
            sig17(self.hp2),
            sig17(self.hp3),
            sig17(self.hp4),
            sig17(self.j_source),
            sig17(self.j_target),
            sig17(self.gap),
            self.diverged,
            sig17(self.wall_time),
        )
    }
}

/// Append-only record sequence, one JSON object per line.
#[derive(Debug, Clone, Default)]
pub struct ResultStore {
    path: Option<PathBuf>,
    records: Vec<ExperimentRecord>,
}

impl ResultStore {
    pub fn in_memory(records: Vec<ExperimentRecord>) -> Result<Self, RunError> {
        let mut store = Self { path: None, records };
        store.canonicalize()?;
        Ok(store)
    }

    /// Reads a results file. A trailing line without a newline that fails to
    /// parse is treated as an interrupted write and dropped.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path)?;
        let ends_clean = text.is_empty() || text.ends_with('\n');
        let lines: Vec<&str> = text.lines().collect();
        let mut records = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ExperimentRecord>(line) {
                Ok(r) => records.push(r),
                Err(_) if i + 1 == lines.len() && !ends_clean => {
                    log::warn!("dropping truncated final line of {}", path.display());
                }
                Err(e) => return Err(RunError::Parse { line: i + 1, message: e.to_string() }),
            }
        }
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.key()) {
                return Err(RunError::DuplicateKey(r.record_id()));
            }
        }
        Ok(Self { path: Some(path.to_path_buf()), records })
    }

    pub fn records(&self) -> &[ExperimentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn keys(&self) -> BTreeSet<RecordKey> {
        self.records.iter().map(|r| r.key()).collect()
    }

    fn canonicalize(&mut self) -> Result<(), RunError> {
        self.records.sort_by_key(|r| r.key());
        for w in self.records.windows(2) {
            if w[0].key() == w[1].key() {
                return Err(RunError::DuplicateKey(w[1].record_id()));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_json_line());
            out.push('\n');
        }
        out
    }

    /// Sorts by key and atomically rewrites the backing file.
    pub fn close(mut self) -> Result<Self, RunError> {
        self.canonicalize()?;
        if let Some(path) = &self.path {
            let tmp = path.with_extension("jsonl.tmp");
            fs::write(&tmp, self.to_jsonl())?;
            fs::rename(&tmp, path)?;
        }
        Ok(self)
    }

    pub fn write_to(&self, path: &Path) -> Result<(), RunError> {
        let mut copy = self.clone();
        copy.canonicalize()?;
        fs::write(path, copy.to_jsonl())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub workers: usize,
    /// Store measured wall time. Off by default: timings differ between runs
    /// and would break byte-identical results files.
    pub record_timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 1, record_timing: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cell {
    task: Task,
    direction: Direction,
    algorithm_id: u8,
    config_index: usize,
    seed: u32,
}

pub fn config_id(algorithm_id: u8, config_index: usize, n_configs: usize) -> u64 {
    algorithm_id as u64 * n_configs as u64 + config_index as u64
}

pub fn sample_config(
    space: &ConfigurationSpace,
    master_seed: u64,
    task: Task,
    direction: Direction,
    algorithm_id: u8,
    config_index: usize,
) -> Result<Configuration, SpaceError> {
    let mut rng =
        rng_from(&[master_seed, task.code(), direction.code(), algorithm_id as u64, config_index as u64, Stage::Sample as u64]);
    space.sample(algorithm_id, &mut rng)
}

/// Seeds of one trial, derived from its coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialSeeds {
    pub train: u64,
    pub eval: u64,
}

impl TrialSeeds {
    pub fn derive(master_seed: u64, task: Task, direction: Direction, algorithm_id: u8, config_id: u64, seed: u32) -> Self {
        let base = [master_seed, task.code(), direction.code(), algorithm_id as u64, config_id, seed as u64];
        let with = |stage: Stage| {
            let mut parts = base.to_vec();
            parts.push(stage as u64);
            derive_seed(&parts)
        };
        Self { train: with(Stage::Train), eval: with(Stage::Eval) }
    }
}

/// Retrains the policy of a stored trial; identical to the one the sweep evaluated.
pub fn retrain_policy(
    record: &ExperimentRecord,
    master_seed: u64,
    budget: &TrainBudget,
    presets: &PhysicsPresets,
) -> Result<(Policy, bool), RunError> {
    let seeds =
        TrialSeeds::derive(master_seed, record.task, record.direction, record.algorithm_id, record.config_id, record.seed);
    let mut env = make_env(record.task, record.direction.source(), presets, None)?;
    let result = train(record.algorithm_id, &record.config(), &mut env, seeds.train, budget)?;
    Ok((result.policy, result.diverged))
}

fn run_cell(
    cell: Cell,
    spec: &RunSpec,
    space: &ConfigurationSpace,
    presets: &PhysicsPresets,
    record_timing: bool,
) -> Result<ExperimentRecord, RunError> {
    let start = Instant::now();
    let config = sample_config(space, spec.master_seed, cell.task, cell.direction, cell.algorithm_id, cell.config_index)?;
    let id = config_id(cell.algorithm_id, cell.config_index, spec.n_configs_per_algorithm);
    let seeds = TrialSeeds::derive(spec.master_seed, cell.task, cell.direction, cell.algorithm_id, id, cell.seed);

    let mut source = make_env(cell.task, cell.direction.source(), presets, None)?;
    let trained = train(cell.algorithm_id, &config, &mut source, seeds.train, &spec.budget)?;
    let episodes = spec.budget.eval_episodes;
    let j_source = evaluate(&trained.policy, &mut source, episodes, seeds.eval)?;
    let mut target = make_env(cell.task, cell.direction.target(), presets, None)?;
    let j_target = evaluate(&trained.policy, &mut target, episodes, seeds.eval)?;
    let gap = compute_gap(j_source, j_target)?;

    let [hp1, hp2, hp3, hp4]: [f64; N_SLOTS] = config.values;
    Ok(ExperimentRecord {
        config_id: id,
        algorithm_id: cell.algorithm_id,
        task: cell.task,
        direction: cell.direction,
        seed: cell.seed,
        hp1,
        hp2,
        hp3,
        hp4,
        j_source,
        j_target,
        gap,
        diverged: trained.diverged,
        wall_time: if record_timing { start.elapsed().as_secs_f64() } else { 0.0 },
    })
}

/// Runs every `(task, direction, algorithm, config_index, seed)` cell not yet
/// present in `out`, appending each record as it completes, then rewrites the
/// file in canonical order.
pub fn run_experiments(
    spec: &RunSpec,
    space: &ConfigurationSpace,
    presets: &PhysicsPresets,
    out: &Path,
    options: RunOptions,
) -> Result<ResultStore, RunError> {
    spec.validate()?;
    space.validate()?;

    let existing = if out.exists() { ResultStore::load(out)? } else { ResultStore::default() };
    let done = existing.keys();
    // drop any torn trailing line before appending
    if out.exists() {
        ResultStore::in_memory(existing.records.clone())?.write_to(out)?;
    }

    let mut cells = Vec::with_capacity(spec.expected_records());
    for &task in &spec.tasks {
        for &direction in &spec.directions {
            for algorithm_id in 0..N_ALGORITHMS {
                for config_index in 0..spec.n_configs_per_algorithm {
                    let id = config_id(algorithm_id, config_index, spec.n_configs_per_algorithm);
                    for seed in 0..spec.seeds_per_config as u32 {
                        if !done.contains(&(task, direction, id, seed)) {
                            cells.push(Cell { task, direction, algorithm_id, config_index, seed });
                        }
                    }
                }
            }
        }
    }
    log::info!("{} of {} cells to run ({} already present)", cells.len(), spec.expected_records(), done.len());

    let file = OpenOptions::new().create(true).append(true).open(out)?;
    let writer = Mutex::new(std::io::BufWriter::new(file));
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(options.workers.max(1)).build().map_err(|e| RunError::Pool(e.to_string()))?;
    pool.install(|| {
        cells.par_iter().try_for_each(|&cell| -> Result<(), RunError> {
            let record = run_cell(cell, spec, space, presets, options.record_timing)?;
            let mut w = writer.lock().expect("writer lock");
            writeln!(w, "{}", record.to_json_line())?;
            w.flush()?;
            Ok(())
        })
    })?;
    drop(writer);

    ResultStore::load(out)?.close()
}

/// Seed-averaged outcome of one configuration in one `(task, direction)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub config_id: u64,
    pub algorithm_id: u8,
    pub task: Task,
    pub direction: Direction,
    pub hp1: f64,
    pub hp2: f64,
    pub hp3: f64,
    pub hp4: f64,
    #[serde(rename = "J_source")]
    pub j_source: f64,
    #[serde(rename = "J_target")]
    pub j_target: f64,
    pub gap: f64,
    pub n_seeds: usize,
    pub any_diverged: bool,
}

impl AggregateRecord {
    pub fn config(&self) -> Configuration {
        Configuration { algorithm_id: self.algorithm_id, values: [self.hp1, self.hp2, self.hp3, self.hp4] }
    }
}

/// Averages `J_source`, `J_target` and the gap over seeds of each configuration.
pub fn aggregate_seeds(records: &[ExperimentRecord]) -> Vec<AggregateRecord> {
    let mut groups: BTreeMap<(Task, Direction, u64), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.task, r.direction, r.config_id)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|rs| {
            let n = rs.len() as f64;
            let mean = |f: fn(&ExperimentRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let first = rs[0];
            AggregateRecord {
                config_id: first.config_id,
                algorithm_id: first.algorithm_id,
                task: first.task,
                direction: first.direction,
                hp1: first.hp1,
                hp2: first.hp2,
                hp3: first.hp3,
                hp4: first.hp4,
                j_source: mean(|r| r.j_source),
                j_target: mean(|r| r.j_target),
                gap: mean(|r| r.gap),
                n_seeds: rs.len(),
                any_diverged: rs.iter().any(|r| r.diverged),
            }
        })
        .collect()
}

/// Writes the store, creating parent directories.
pub fn save_records(records: &[ExperimentRecord], path: &Path) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    ResultStore::in_memory(records.to_vec())?.write_to(path)
}

/// Streams records without building a store, for quick inspection.
pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>, RunError> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RunError::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}
