use std::path::Path;
use std::process::{Command, Output};

fn popelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.lines().count(), 1, "stderr: {text}");
    serde_json::from_str(text.trim()).expect("one JSON line")
}

#[test]
fn passk_check_rows_all_agree() {
    let out = popelab(&["passk-check", "--n", "6", "--k", "3"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.ends_with("true")));
}

fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "suite": {"hard_count": 3, "hard_len": 4, "grammar_branching": 2},
        "base": {"steps": 40},
        "total_steps": 6,
        "eval_interval": 3,
        "eval_n": 16
    });
    let path = dir.join("c.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = popelab(&["train", "--config", &cfg, "--seed", "1", "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        files.push(std::fs::read(out_dir.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(files[0], files[1]);

    let ck = dir.path().join("a/checkpoint.json");
    let out = popelab(&["eval", "--checkpoint", ck.to_str().unwrap(), "--n", "16", "--k", "1,8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["k"], 8);
}

#[test]
fn train_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("o");
    let out = popelab(&[
        "train", "--config", &cfg, "--steps", "3", "--method", "PassK(2)", "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["method"], "PassK(2)");
    assert_eq!(summary["step"], 3);
}

#[test]
fn eval_of_missing_checkpoint_names_the_path() {
    let out = popelab(&["eval", "--checkpoint", "missing.json"]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("missing.json"));
}

#[test]
fn malformed_config_and_unknown_subcommand_fail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"total_stpes": 3}"#).unwrap();
    let out = popelab(&["train", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "json");

    let out = popelab(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn make_suite_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite.json");
    let out = popelab(&["make-suite", "--seed", "4", "--out", suite.to_str().unwrap()]);
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&suite).unwrap()).unwrap();
    assert!(doc["problems"].as_array().is_some_and(|p| !p.is_empty()));

    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        serde_json::json!({
            "base": {"total_steps": 2, "eval_interval": 1, "eval_n": 8, "suite": {"hard_count": 2, "hard_len": 3}},
            "grid": {"seed": [0, 1]}
        })
        .to_string(),
    )
    .unwrap();
    let sweep_dir = dir.path().join("sweep");
    let out = popelab(&["sweep", "--spec", spec.to_str().unwrap(), "--out", sweep_dir.to_str().unwrap(), "--jobs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(sweep_dir.join("sweep.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 2);
}
