use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use panel_ope::envsim::{generate, EnvSpec};
use panel_ope::harness::{run_estimator, EstimatorKind, EstimatorOptions};
use panel_ope::{PolicySpec, ValueReport};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panel-ope"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_then_estimate_matches_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--preset", "paper-tabular", "--n-individuals", "12", "--n-timepoints", "10", "--seed", "4", "--out-dir", p(d)]);
    let est_dir = d.join("est");
    ok(&["estimate", "--data", p(&d.join("data.csv")), "--policy", "agnostic:0.2,0.8", "--out-dir", p(&est_dir)]);
    let from_file = ValueReport::from_json(&fs::read_to_string(est_dir.join("report.json")).unwrap()).unwrap();

    let data = generate(&EnvSpec::paper_tabular(12, 10, 4)).unwrap();
    let policy = PolicySpec::parse("agnostic:0.2,0.8").unwrap();
    let in_memory = run_estimator(
        EstimatorKind::ModelFree,
        &data,
        &policy.build().unwrap(),
        &policy.id(),
        &EstimatorOptions::default(),
        0,
    )
    .unwrap();
    assert_eq!(from_file, in_memory);
    let eta_i = fs::read_to_string(est_dir.join("eta_i.csv")).unwrap();
    assert_eq!(eta_i.lines().count(), 13);
    assert!(eta_i.starts_with("i,eta_i"));
    assert_eq!(fs::read_to_string(est_dir.join("eta_t.csv")).unwrap().lines().count(), 11);
}

#[test]
fn missing_cell_is_reported_by_position() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--n-individuals", "4", "--n-timepoints", "8", "--out-dir", p(d)]);
    let text = fs::read_to_string(d.join("data.csv")).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("3,7,")).collect();
    assert_eq!(kept.len(), text.lines().count() - 1);
    fs::write(d.join("holed.csv"), kept.join("\n")).unwrap();
    let out = cli(&["estimate", "--data", p(&d.join("holed.csv")), "--out-dir", p(d)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing cell (3,7)"), "{err}");
}

#[test]
fn benchmark_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.toml");
    fs::write(
        &config,
        "preset = \"paper-tabular\"\nn_individuals = 10\nn_timepoints = 8\nn_replications = 3\nestimators = [\"twdidp-mf\", \"b1\", \"b4\"]\n[options]\nn_rollouts = 20\n",
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["benchmark", "--config", p(&config), "--seed", "11", "--threads", "2", "--out-dir", p(out)]);
    }
    for f in ["metrics.json", "metrics.csv", "records.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 4);

    // a flag overrides the file
    let c = dir.path().join("c");
    ok(&["benchmark", "--config", p(&config), "--replications", "1", "--estimators", "b1", "--out-dir", p(&c)]);
    assert_eq!(fs::read_to_string(c.join("metrics.csv")).unwrap().lines().count(), 5);
}

#[test]
fn oracle_writes_truth_grid() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["oracle", "--n-individuals", "3", "--n-timepoints", "4", "--out-dir", p(dir.path())]);
    let text = fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 12);
    ok(&[
        "oracle", "--preset", "paper-continuous", "--n-individuals", "2", "--n-timepoints", "3", "--mc-reps", "20", "--out-dir",
        p(dir.path()),
    ]);
    assert!(dir.path().join("truth_se.csv").exists());
}

#[test]
fn several_policies_are_ranked() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--preset", "paper-continuous", "--n-individuals", "20", "--n-timepoints", "12", "--out-dir", p(d)]);
    let out = ok(&[
        "estimate", "--data", p(&d.join("data.csv")),
        "--policy", "agnostic:0,1",
        "--policy", "agnostic:1,0",
        "--policy", "threshold:0:0:0,1:1,0",
        "--out-dir", p(d),
    ]);
    assert_eq!(out.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("comparison.json")).unwrap()).unwrap();
    let ranking = summary["ranking"].as_array().unwrap();
    assert_eq!(ranking.len(), 3);
    let etas: Vec<f64> = ranking.iter().map(|r| r[1].as_f64().unwrap()).collect();
    assert!(etas.windows(2).all(|w| w[0] <= w[1]));
    assert!(d.join("policy_3").join("report.json").exists());
}

#[test]
fn unknown_preset_fails_cleanly() {
    let out = cli(&["simulate", "--preset", "nope"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("paper-tabular"));
}
