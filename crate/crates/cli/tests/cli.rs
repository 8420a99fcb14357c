use std::path::Path;
use std::process::{Command, Output};

fn nsdt(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsdt"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn plan_prints_operators_and_cost() {
    let dir = tempfile::tempdir().unwrap();
    let o = nsdt(dir.path(), &["plan", "--env", "case1_default"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().last().unwrap().starts_with("cost "), "{text}");
    let o = nsdt(dir.path(), &["plan", "--env", "case2_default"]);
    assert!(stdout(&o).contains("cost 25"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = nsdt(dir.path(), &["plan", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn evaluate_without_checkpoints_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = nsdt(dir.path(), &["evaluate", "--methods", "hybrid", "--episodes", "2", "--seeds", "1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("simple_hybrid.ckpt"));
}

#[test]
fn bad_config_and_env_fail_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\"schema_version\": 99}").unwrap();
    let o = nsdt(dir.path(), &["--config", cfg.to_str().unwrap(), "plan"]);
    assert_eq!(o.status.code(), Some(1));
    let o = nsdt(dir.path(), &["env", "--env", "no_such_preset"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn small_pipeline_round_trips_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let run = |args: &[&str]| {
        let o = nsdt(out, args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    run(&["gen-data", "--mode", "hybrid", "--episodes", "12"]);
    assert!(out.join("data/simple_hybrid.jsonl").exists());
    let train = run(&["train", "--method", "hybrid", "--epochs", "1"]);
    assert!(train.contains("epoch   1"));
    run(&["rollout", "--method", "hybrid", "--episodes", "2"]);
    run(&["evaluate", "--methods", "hybrid,scripted", "--episodes", "4", "--seeds", "2"]);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    // header plus 2 methods x 3 fail probabilities
    assert_eq!(csv.lines().count(), 7, "{csv}");
    run(&["report", "--recompute"]);
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap(), csv);
    // the heatmap needs all seven methods
    let o = nsdt(out, &["report", "--heatmap"]);
    assert_eq!(o.status.code(), Some(1));
}
