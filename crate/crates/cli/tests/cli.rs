use std::path::Path;
use std::process::{Command, Output};

fn simgap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simgap"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(["--workers", "1", "--out-dir", "out"])
        .args(args)
        .output()
        .unwrap()
}

const SMALL: [&str; 8] = ["--n", "4", "--seeds", "1", "--steps", "1500", "--eval-episodes", "3"];

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn invalid_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(simgap(d, &["space", "--space", "missing.toml"]).status.code(), Some(2));
    assert_eq!(simgap(d, &["run", "--tasks", "Hopper"]).status.code(), Some(2));
    assert_eq!(simgap(d, &["run", "--n", "0"]).status.code(), Some(2));
    assert_eq!(simgap(d, &["pipeline", "--space", "missing.toml"]).status.code(), Some(2));
    assert!(!d.join("out").exists());
    std::fs::write(d.join("bad.toml"), "schema_version = 1\n").unwrap();
    assert_eq!(simgap(d, &["space", "--space", "bad.toml"]).status.code(), Some(2));
    assert_eq!(simgap(d, &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = simgap(tmp.path(), &["fit", "--in", "missing.jsonl"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn space_prints_a_loadable_file() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&simgap(tmp.path(), &["space"]));
    std::fs::write(tmp.path().join("s.toml"), &text).unwrap();
    ok(&simgap(tmp.path(), &["space", "--space", "s.toml"]));
    let samples = ok(&simgap(tmp.path(), &["space", "--sample", "2"]));
    assert_eq!(samples.lines().count(), 8);
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut run = vec!["run"];
    run.extend(SMALL);
    ok(&simgap(d, &run));
    ok(&simgap(d, &["fit", "--in", "out/runs.jsonl", "--trees", "10"]));
    ok(&simgap(d, &["explain", "--model", "out/model.json", "--runs", "out/runs.jsonl", "--background", "8"]));
    ok(&simgap(d, &["interact", "--model", "out/model.json", "--runs", "out/runs.jsonl", "--background", "8"]));
    ok(&simgap(d, &["select", "--model", "out/model.json", "--candidates", "150"]));
    ok(&simgap(d, &["validate", "--selection", "out/selection.json", "--runs", "out/runs.jsonl"]));
    ok(&simgap(d, &["sensitivity", "--runs", "out/runs.jsonl", "--steps", "1500", "--eval-episodes", "3", "--episodes", "2"]));
    ok(&simgap(d, &["bound", "--runs", "out/runs.jsonl", "--sens", "out/sens.jsonl"]));
    let out = ok(&simgap(d, &["report"]));
    assert!(out.contains("bundle hash"));
    for f in ["attributions.csv", "interactions.csv", "dependence.csv", "validation.json", "bound.json", "plots/validation.svg"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn pipeline_reruns_from_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut args = vec!["pipeline", "--trees", "10", "--candidates", "150", "--background", "8"];
    args.extend(SMALL);
    let first = ok(&simgap(d, &args));
    std::fs::rename(d.join("out"), d.join("first")).unwrap();
    let again = ok(&simgap(d, &["pipeline", "--from-manifest", "first/manifest.json"]));
    assert!(again.contains("matches manifest"));
    assert_eq!(first.lines().next(), again.lines().next());
}

#[test]
fn pinned_range_changes_only_beeswarms() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut args = vec!["pipeline", "--trees", "10", "--candidates", "150", "--background", "8"];
    args.extend(SMALL);
    ok(&simgap(d, &args));
    let auto = std::fs::read(d.join("out/plots/beeswarm_ppo.svg")).unwrap();
    ok(&simgap(d, &["report", "--shap-range", "-500,1250"]));
    assert_ne!(std::fs::read(d.join("out/plots/beeswarm_ppo.svg")).unwrap(), auto);
    assert_eq!(simgap(d, &["report", "--shap-range", "3,1"]).status.code(), Some(2));
}
