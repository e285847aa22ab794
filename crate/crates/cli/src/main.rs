use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use simgap::config_space::{load_space, ConfigurationSpace};
use simgap::envlab::{Direction, PhysicsPresets, Task};
use simgap::guidance::{bound_inputs, check_bound, validate_selection, MatchGranularity, SelectionReport, SensitivityRecord};
use simgap::report::pipeline::{self as pl, PipelineConfig, PipelineError};
use simgap::report::{
    dependence_by_group, emit_attributions, emit_beeswarm_data, emit_dependence, emit_interaction_matrix, ExplainedSet,
    InteractionSummary, DEFAULT_DEGREE,
};
use simgap::runner::{run_experiments, RunOptions, RunSpec};
use simgap::seed::rng_from;
use simgap::shapley::{batch_explain, batch_interactions, DEFAULT_BACKGROUND_SIZE};
use simgap::surrogate::{ForestParams, ModelArtifact, ModelScope};
use simgap::trainers::TrainBudget;

#[derive(Parser)]
#[command(name = "simgap", version, about = "Attribute sim-to-sim generalization gaps to algorithm and hyperparameter choices")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    master_seed: u64,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true, default_value_t = default_workers())]
    workers: usize,
    /// Directory that receives outputs whose path is not given explicitly.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Physics presets file; the bundled presets are used otherwise.
    #[arg(long, global = true)]
    physics: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Subcommand)]
enum Command {
    /// Validate a space file, or print the bundled one.
    Space(SpaceArgs),
    /// Sweep configurations and append one record per trial.
    Run(RunArgs),
    /// Fit random-forest surrogates of the gap.
    Fit(FitArgs),
    /// Exact attributions, beeswarm and dependence tables.
    Explain(ExplainArgs),
    /// Mean interaction matrices per algorithm.
    Interact(ExplainArgs),
    /// Pick the best and worst predicted configurations.
    Select(SelectArgs),
    /// Compare a selection against the nearest measured runs.
    Validate(ValidateArgs),
    /// Retrain policies and estimate their physics sensitivity.
    Sensitivity(SensitivityArgs),
    /// Check the gap bound and its rank correlation.
    Bound(BoundArgs),
    /// Render plots from the tables in a directory.
    Report(ReportArgs),
    /// Run every stage into the output directory.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SpaceArgs {
    #[arg(long)]
    space: Option<PathBuf>,
    /// Print this many sampled configurations per algorithm as JSON lines.
    #[arg(long, default_value_t = 0)]
    sample: usize,
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "GridSlip,PendulumLite")]
    tasks: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "M->P,P->M")]
    directions: Vec<String>,
    /// Configurations per algorithm.
    #[arg(long, default_value_t = 25)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    seeds: usize,
    #[arg(long, default_value_t = 20_000)]
    steps: u64,
    #[arg(long, default_value_t = 20)]
    eval_episodes: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock time per trial (makes the file non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct ForestArgs {
    #[arg(long, default_value_t = 200)]
    trees: usize,
    #[arg(long, default_value_t = 8)]
    max_depth: usize,
    #[arg(long, default_value_t = 3)]
    min_leaf: usize,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, conflicts_with = "global")]
    per_algorithm: bool,
    #[arg(long)]
    global: bool,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BACKGROUND_SIZE)]
    background: usize,
    /// Polynomial degree of the dependence trends.
    #[arg(long, default_value_t = DEFAULT_DEGREE)]
    degree: usize,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    candidates: usize,
    /// Candidate sampling seed; derived from the master seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_BACKGROUND_SIZE)]
    background: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    selection: PathBuf,
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    space: Option<PathBuf>,
    /// Match individual records instead of seed means.
    #[arg(long)]
    per_record: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SensitivityArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    /// Training budget the runs were produced with.
    #[arg(long, default_value_t = 20_000)]
    steps: u64,
    #[arg(long, default_value_t = 20)]
    eval_episodes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    sens: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding the tables; defaults to the output directory.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Pin the beeswarm shap axis to `LOW,HIGH` instead of auto-ranging.
    #[arg(long, value_name = "LOW,HIGH", allow_hyphen_values = true)]
    shap_range: Option<String>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long, default_value_t = 10_000)]
    candidates: usize,
    #[arg(long, default_value_t = DEFAULT_BACKGROUND_SIZE)]
    background: usize,
    #[arg(long, default_value_t = DEFAULT_DEGREE)]
    degree: usize,
    #[arg(long)]
    per_record: bool,
    /// Also run the sensitivity and bound stages.
    #[arg(long)]
    sensitivity: bool,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 20)]
    sensitivity_episodes: usize,
    #[arg(long, value_name = "LOW,HIGH", allow_hyphen_values = true)]
    shap_range: Option<String>,
    /// Rerun the configuration recorded in a manifest and compare bundle hashes.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.stage == "space" {
            Failure::Invalid(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn invalid<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Invalid(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let workers = cli.workers.max(1);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Space(a) => space_cmd(cli, a),
        Command::Run(a) => run_cmd(cli, a),
        Command::Fit(a) => fit_cmd(cli, a),
        Command::Explain(a) => explain_cmd(cli, a),
        Command::Interact(a) => interact_cmd(cli, a),
        Command::Select(a) => select_cmd(cli, a),
        Command::Validate(a) => validate_cmd(cli, a),
        Command::Sensitivity(a) => sensitivity_cmd(cli, a),
        Command::Bound(a) => bound_cmd(cli, a),
        Command::Report(a) => report_cmd(cli, a),
        Command::Pipeline(a) => pipeline_cmd(cli, a),
    }
}

fn output(cli: &Cli, explicit: &Option<PathBuf>, default_name: &str) -> Result<PathBuf, Failure> {
    let path = explicit.clone().unwrap_or_else(|| cli.out_dir.join(default_name));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(runtime)?;
    }
    Ok(path)
}

fn space_from(path: &Option<PathBuf>) -> Result<ConfigurationSpace, Failure> {
    let space = match path {
        Some(p) => load_space(p).map_err(invalid)?,
        None => ConfigurationSpace::default_space(),
    };
    space.validate().map_err(invalid)?;
    Ok(space)
}

fn presets_from(cli: &Cli) -> Result<PhysicsPresets, Failure> {
    match &cli.physics {
        Some(p) => PhysicsPresets::load(p).map_err(invalid),
        None => Ok(PhysicsPresets::bundled()),
    }
}

fn run_spec(cli: &Cli, s: &SweepArgs) -> Result<RunSpec, Failure> {
    let tasks =
        s.tasks.iter().map(|t| t.parse::<Task>()).collect::<Result<Vec<_>, _>>().map_err(|e| invalid(anyhow::anyhow!(e)))?;
    let directions = s
        .directions
        .iter()
        .map(|d| d.parse::<Direction>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| invalid(anyhow::anyhow!(e)))?;
    let spec = RunSpec {
        tasks,
        directions,
        n_configs_per_algorithm: s.n,
        seeds_per_config: s.seeds,
        budget: TrainBudget { total_env_steps: s.steps, eval_episodes: s.eval_episodes },
        master_seed: cli.master_seed,
    };
    spec.validate().map_err(invalid)?;
    Ok(spec)
}

fn forest_params(f: &ForestArgs) -> ForestParams {
    ForestParams { n_trees: f.trees, max_depth: f.max_depth, min_leaf: f.min_leaf, ..ForestParams::default() }
}

fn space_cmd(cli: &Cli, a: &SpaceArgs) -> Outcome {
    let space = space_from(&a.space)?;
    let mut text = String::new();
    if a.sample == 0 {
        text = space.to_toml_string();
    } else {
        let mut rng = rng_from(&[cli.master_seed]);
        for alg in &space.algorithms {
            for _ in 0..a.sample {
                let c = space.sample(alg.algorithm_id, &mut rng).map_err(runtime)?;
                text.push_str(&serde_json::to_string(&c).map_err(runtime)?);
                text.push('\n');
            }
        }
    }
    // a closed pipe is not an error for a listing
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(runtime(e)),
        _ => Ok(()),
    }
}

fn run_cmd(cli: &Cli, a: &RunArgs) -> Outcome {
    let space = space_from(&a.sweep.space)?;
    let presets = presets_from(cli)?;
    let spec = run_spec(cli, &a.sweep)?;
    let out = output(cli, &a.out, pl::RUNS_FILE)?;
    info!("{} trials into {}", spec.expected_records(), out.display());
    let store = run_experiments(&spec, &space, &presets, &out, RunOptions { workers: cli.workers, record_timing: a.timing })
        .map_err(runtime)?;
    println!("{} records in {}", store.len(), out.display());
    Ok(())
}

fn fit_cmd(cli: &Cli, a: &FitArgs) -> Outcome {
    let space = space_from(&a.space)?;
    let records = pl::load_records(&a.input)?;
    let (global, per_alg) = match (a.global, a.per_algorithm) {
        (false, false) => (true, true),
        flags => flags,
    };
    let artifact = pl::fit_scopes(&records, &space, &forest_params(&a.forest), cli.master_seed, global, per_alg)?;
    let out = output(cli, &a.out, pl::MODEL_FILE)?;
    artifact.save(&out).map_err(runtime)?;
    for m in &artifact.models {
        let label = pl::scope_label(&space, m.scope);
        match &m.fit_report {
            Some(r) => println!("{label}: n={} cv_r2={:.4} cv_mae={:.4}", m.training_x.len(), r.r2, r.mae),
            None => println!("{label}: n={}", m.training_x.len()),
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelArtifact, Failure> {
    ModelArtifact::load(path).map_err(runtime)
}

fn explain_cmd(cli: &Cli, a: &ExplainArgs) -> Outcome {
    let space = space_from(&a.space)?;
    let artifact = load_model(&a.model)?;
    let records = pl::load_records(&a.runs)?;
    fs::create_dir_all(&cli.out_dir).map_err(runtime)?;
    let mut sets = Vec::new();
    for model in artifact.models.iter().filter(|m| m.scope != ModelScope::Global) {
        let bg = pl::background_for(model, a.background, cli.master_seed)?;
        let attributions = batch_explain(&model.forest, &model.training_x, &bg).map_err(runtime)?;
        sets.push(ExplainedSet {
            scope: pl::scope_label(&space, model.scope),
            feature_names: model.feature_names.clone(),
            record_ids: model.training_ids.clone(),
            attributions,
        });
    }
    emit_attributions(&sets, &cli.out_dir.join(pl::ATTRIBUTIONS_FILE)).map_err(runtime)?;
    let mut series = Vec::new();
    for set in &sets {
        emit_beeswarm_data(set, &records, &cli.out_dir.join(pl::beeswarm_file(&set.scope))).map_err(runtime)?;
        series.extend(dependence_by_group(set, &records, &["learning_rate", "gamma"], a.degree).map_err(runtime)?);
    }
    emit_dependence(&series, &cli.out_dir.join(pl::DEPENDENCE_FILE), &cli.out_dir.join(pl::DEPENDENCE_FIT_FILE))
        .map_err(runtime)?;
    println!("explained {} models into {}", sets.len(), cli.out_dir.display());
    Ok(())
}

fn interact_cmd(cli: &Cli, a: &ExplainArgs) -> Outcome {
    let space = space_from(&a.space)?;
    let artifact = load_model(&a.model)?;
    fs::create_dir_all(&cli.out_dir).map_err(runtime)?;
    let mut summaries = Vec::new();
    for model in artifact.models.iter().filter(|m| m.scope != ModelScope::Global) {
        let bg = pl::background_for(model, a.background, cli.master_seed)?;
        let matrices = batch_interactions(&model.forest, &model.training_x, &bg).map_err(runtime)?;
        summaries.push(InteractionSummary::from_matrices(&pl::scope_label(&space, model.scope), &model.feature_names, &matrices));
    }
    let out = cli.out_dir.join(pl::INTERACTIONS_FILE);
    emit_interaction_matrix(&summaries, &out).map_err(runtime)?;
    println!("interactions for {} models in {}", summaries.len(), out.display());
    Ok(())
}

fn select_cmd(cli: &Cli, a: &SelectArgs) -> Outcome {
    let space = space_from(&a.space)?;
    let artifact = load_model(&a.model)?;
    let selection = match a.seed {
        Some(seed) => {
            let global = artifact.global().ok_or_else(|| runtime(anyhow::anyhow!("model file has no global model")))?;
            let bg = pl::background_for(global, a.background, cli.master_seed)?;
            let mut rng = rng_from(&[seed]);
            simgap::guidance::select_configurations(&global.forest, &space, a.candidates, &mut rng, &bg).map_err(invalid)?
        }
        None => pl::select_with(&artifact, &space, a.candidates, a.background, cli.master_seed)?,
    };
    let out = output(cli, &a.out, pl::SELECTION_FILE)?;
    pl::write_json(&out, &selection, "select")?;
    println!("best predicted gap {:.4}, worst {:.4}", selection.best.predicted_gap, selection.worst.predicted_gap);
    Ok(())
}

fn validate_cmd(cli: &Cli, a: &ValidateArgs) -> Outcome {
    let space = space_from(&a.space)?;
    let selection: SelectionReport = pl::read_json(&a.selection, "validate")?;
    let records = pl::load_records(&a.runs)?;
    let granularity = if a.per_record { MatchGranularity::Record } else { MatchGranularity::SeedMean };
    let report = validate_selection(&selection, &records, &space, granularity).map_err(runtime)?;
    let out = output(cli, &a.out, pl::VALIDATION_FILE)?;
    pl::write_json(&out, &report, "validate")?;
    println!(
        "mean actual gap: best {:.4}, worst {:.4}, direction {}",
        report.mean_actual_best,
        report.mean_actual_worst,
        if report.directional_consistent { "holds" } else { "reversed" }
    );
    Ok(())
}

fn sensitivity_cmd(cli: &Cli, a: &SensitivityArgs) -> Outcome {
    let presets = presets_from(cli)?;
    let records = pl::load_records(&a.runs)?;
    if !(a.delta > 0.0 && a.delta.is_finite()) {
        return Err(invalid(anyhow::anyhow!("--delta must be positive")));
    }
    let mut tasks: Vec<Task> = records.iter().map(|r| r.task).collect();
    tasks.sort();
    tasks.dedup();
    let mut directions: Vec<Direction> = records.iter().map(|r| r.direction).collect();
    directions.sort();
    directions.dedup();
    let spec = RunSpec {
        tasks,
        directions,
        n_configs_per_algorithm: 1,
        seeds_per_config: 1,
        budget: TrainBudget { total_env_steps: a.steps, eval_episodes: a.eval_episodes },
        master_seed: cli.master_seed,
    };
    let sens = pl::sensitivities(&records, &spec, &presets, a.delta, a.episodes)?;
    let out = output(cli, &a.out, pl::SENSITIVITY_FILE)?;
    pl::write_jsonl(&out, &sens, "sensitivity")?;
    println!("{} sensitivity estimates in {}", sens.len(), out.display());
    Ok(())
}

fn bound_cmd(cli: &Cli, a: &BoundArgs) -> Outcome {
    let presets = presets_from(cli)?;
    let records = pl::load_records(&a.runs)?;
    let sens: Vec<SensitivityRecord> = pl::read_jsonl(&a.sens, "bound")?;
    let inputs = bound_inputs(&records, &sens, &presets).map_err(runtime)?;
    let report = check_bound(&inputs);
    let out = output(cli, &a.out, pl::BOUND_FILE)?;
    pl::write_json(&out, &report, "bound")?;
    let rho = report.spearman.map(|r| format!("{r:.4}")).unwrap_or_else(|| "n/a".into());
    let flag = if report.correlation_ok { "" } else { " (below target, flagged)" };
    println!("bound satisfied for {:.3} of rows; spearman {rho}{flag}", report.satisfied_fraction);
    Ok(())
}

fn scopes_in(dir: &Path) -> Result<Vec<String>, Failure> {
    let mut scopes = Vec::new();
    for entry in fs::read_dir(dir).map_err(runtime)? {
        let name = entry.map_err(runtime)?.file_name().to_string_lossy().into_owned();
        if let Some(scope) = name.strip_prefix("beeswarm_").and_then(|n| n.strip_suffix(".csv")) {
            scopes.push(scope.to_string());
        }
    }
    if let Ok(text) = fs::read_to_string(dir.join(pl::INTERACTIONS_FILE)) {
        for line in text.lines().skip(1) {
            if let Some(scope) = line.split(',').next() {
                scopes.push(scope.to_string());
            }
        }
    }
    scopes.sort();
    scopes.dedup();
    Ok(scopes)
}

fn shap_range(v: &Option<String>) -> Result<Option<(f64, f64)>, Failure> {
    let Some(text) = v else { return Ok(None) };
    let parsed: Vec<f64> = text.split(',').filter_map(|p| p.trim().parse().ok()).collect();
    match parsed[..] {
        [lo, hi] if text.split(',').count() == 2 && lo < hi && lo.is_finite() && hi.is_finite() => Ok(Some((lo, hi))),
        _ => Err(invalid(anyhow::anyhow!("--shap-range needs LOW,HIGH with LOW < HIGH"))),
    }
}

fn report_cmd(cli: &Cli, a: &ReportArgs) -> Outcome {
    let dir = a.dir.clone().unwrap_or_else(|| cli.out_dir.clone());
    let scopes = scopes_in(&dir)?;
    let written = pl::render_plots(&dir, &scopes, shap_range(&a.shap_range)?)?;
    let (_, bundle) = pl::hash_bundle(&dir)?;
    println!("{} plots written; bundle hash {bundle}", written.len());
    Ok(())
}

fn pipeline_cmd(cli: &Cli, a: &PipelineArgs) -> Outcome {
    let (config, expected) = match &a.from_manifest {
        Some(path) => {
            let manifest = pl::Manifest::load(path)?;
            (manifest.config, Some(manifest.bundle_hash))
        }
        None => {
            let mut config = PipelineConfig::new(run_spec(cli, &a.sweep)?);
            config.space_path = a.sweep.space.clone();
            config.physics_path = cli.physics.clone();
            config.forest = forest_params(&a.forest);
            config.background_size = a.background;
            config.candidates = a.candidates;
            config.degree = a.degree;
            config.granularity = if a.per_record { MatchGranularity::Record } else { MatchGranularity::SeedMean };
            config.sensitivity = a.sensitivity;
            config.delta_rel = a.delta;
            config.sensitivity_episodes = a.sensitivity_episodes;
            config.shap_range = shap_range(&a.shap_range)?;
            (config, None)
        }
    };
    let manifest = pl::run_pipeline(&config, &cli.out_dir, cli.workers)?;
    println!("bundle hash {}", manifest.bundle_hash);
    if let Some(expected) = expected {
        if expected != manifest.bundle_hash {
            return Err(runtime(anyhow::anyhow!("bundle hash {} differs from manifest {expected}", manifest.bundle_hash)));
        }
        println!("matches manifest");
    }
    Ok(())
}
