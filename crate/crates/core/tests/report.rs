mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use simgap::envlab::{Direction, Task};
use simgap::report::pipeline::{self as pl, Manifest, PipelineConfig};
use simgap::report::{emit_attributions, fit_polynomial, read_beeswarm};
use simgap::runner::{read_records, RunSpec};
use simgap::seed::rng_from;
use simgap::surrogate::ForestParams;
use simgap::trainers::TrainBudget;

fn tiny() -> PipelineConfig {
    let run = RunSpec {
        tasks: vec![Task::GridSlip, Task::PendulumLite],
        directions: Direction::ALL.to_vec(),
        n_configs_per_algorithm: 4,
        seeds_per_config: 1,
        budget: TrainBudget { total_env_steps: 1_500, eval_episodes: 3 },
        master_seed: 5,
    };
    let mut c = PipelineConfig::new(run);
    c.forest = ForestParams { n_trees: 20, ..ForestParams::default() };
    c.candidates = 200;
    c.background_size = 16;
    c.sensitivity = true;
    c.sensitivity_episodes = 2;
    c
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let m = Manifest::load(&dir.join(pl::MANIFEST_FILE)).unwrap();
    m.artifacts.iter().map(|a| (a.path.clone(), fs::read(dir.join(&a.path)).unwrap())).collect()
}

#[test]
fn pipeline_is_reproducible_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ma = pl::run_pipeline(&tiny(), &a, 1).unwrap();
    let mb = pl::run_pipeline(&tiny(), &b, 3).unwrap();
    assert_eq!(ma.bundle_hash, mb.bundle_hash);
    assert_eq!(files(&a), files(&b));
    for name in [
        pl::RUNS_FILE,
        pl::MODEL_FILE,
        pl::ATTRIBUTIONS_FILE,
        pl::INTERACTIONS_FILE,
        pl::SELECTION_FILE,
        pl::VALIDATION_FILE,
        pl::SENSITIVITY_FILE,
        pl::BOUND_FILE,
        pl::DEPENDENCE_FILE,
        pl::DEPENDENCE_FIT_FILE,
    ] {
        assert!(a.join(name).exists(), "{name} missing");
    }

    // rerunning from the manifest reproduces the bundle
    let again = tmp.path().join("again");
    let m = Manifest::load(&a.join(pl::MANIFEST_FILE)).unwrap();
    assert_eq!(pl::run_pipeline(&m.config, &again, 2).unwrap().bundle_hash, ma.bundle_hash);
}

#[test]
fn tables_reference_known_records_and_plots_match_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pl::run_pipeline(&tiny(), dir, 1).unwrap();
    let ids: BTreeSet<String> = read_records(&dir.join(pl::RUNS_FILE)).unwrap().iter().map(|r| r.record_id()).collect();

    let text = fs::read_to_string(dir.join(pl::ATTRIBUTIONS_FILE)).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "record_id").unwrap();
    for line in text.lines().skip(1) {
        assert!(ids.contains(line.split(',').nth(col).unwrap()));
    }

    for scope in ["ppo", "a2c", "ddpg", "sac"] {
        let rows = read_beeswarm(&dir.join(pl::beeswarm_file(scope))).unwrap();
        assert_eq!(rows.len(), 16 * 4);
        assert!(rows.iter().all(|r| ids.contains(&r.record_id)));
        let svg = fs::read_to_string(dir.join("plots").join(format!("beeswarm_{scope}.svg"))).unwrap();
        assert_eq!(svg.matches("<circle").count(), rows.len());
    }

    // plots are a pure function of the tables
    let mut before: Vec<_> = fs::read_dir(dir.join("plots")).unwrap().map(|e| fs::read(e.unwrap().path()).unwrap()).collect();
    fs::remove_dir_all(dir.join("plots")).unwrap();
    let scopes: Vec<String> = ["ppo", "a2c", "ddpg", "sac"].map(String::from).to_vec();
    pl::render_plots(dir, &scopes, None).unwrap();
    let mut after: Vec<_> = fs::read_dir(dir.join("plots")).unwrap().map(|e| fs::read(e.unwrap().path()).unwrap()).collect();
    before.sort();
    after.sort();
    assert_eq!(before, after);
}

#[test]
fn missing_space_file_leaves_no_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bundle");
    let mut c = tiny();
    c.space_path = Some(tmp.path().join("nope.toml"));
    let err = pl::run_pipeline(&c, &out, 1).unwrap_err();
    assert_eq!(err.stage, "space");
    assert!(!out.exists());
}

#[test]
fn fit_residual_matches_direct_evaluation() {
    let mut rng = rng_from(&[12]);
    for _ in 0..20 {
        let n = rng.gen_range(3..40);
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v * v - v + rng.gen_range(-0.3..0.3)).collect();
        let fit = fit_polynomial(&x, &y, 2).unwrap();
        let direct: f64 = x
            .iter()
            .zip(&y)
            .map(|(xi, yi)| {
                let c = &fit.coefficients;
                (yi - (c[0] + c[1] * xi + c[2] * xi * xi)).powi(2)
            })
            .sum();
        assert!((fit.residual - direct).abs() <= 1e-9 * direct.max(1.0));
    }
    let flat = fit_polynomial(&[0.1, 0.5, 0.9], &[3.0, 3.0, 3.0], 2).unwrap();
    assert!(flat.coefficients[1].abs() < 1e-9 && flat.coefficients[2].abs() < 1e-9);
}

#[test]
fn empty_attribution_set_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("a.csv");
    assert_eq!(emit_attributions(&[], &path).unwrap(), 0);
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
}
