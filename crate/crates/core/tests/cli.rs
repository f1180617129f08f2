mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mifo::experiment::{read_metrics, Mode, OUTPUT_DIR_ENV};
use serde_json::Value;

fn mifo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mifo"))
        .args(args)
        .env_remove(OUTPUT_DIR_ENV)
        .output()
        .expect("spawn mifo")
}

fn json_line(bytes: &[u8]) -> Value {
    let text = String::from_utf8_lossy(bytes);
    let line = text.lines().last().unwrap_or_else(|| panic!("no output: {text}"));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not json ({e}): {line}"))
}

fn write_config(dir: &Path, mode: Mode) -> PathBuf {
    let cfg = common::tiny(mode, &dir.join("run"));
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), Mode::Mifo);
    let out = mifo(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json_line(&out.stdout);
    assert_eq!(v["command"], "train");
    assert_eq!(v["finished"], true);
    let ckpt = v["checkpoint"].as_str().unwrap().to_string();
    assert!(ckpt.ends_with("final.ckpt"));

    let out = mifo(&["eval", "--ckpt", &ckpt, "--split", "eval", "--k", "2"]);
    assert!(out.status.success());
    let v = json_line(&out.stdout);
    let s = &v["scores"];
    assert_eq!(s["k"], 2);
    let p1 = s["pass_at_1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p1));

    let metrics = dir.path().join("run/metrics.jsonl");
    let plots = dir.path().join("plots");
    let out = mifo(&["plot", "--metrics", metrics.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(plots.join("records.csv").exists());
    assert_eq!(json_line(&out.stdout)["skipped"], 0);
}

#[test]
fn resume_flag_finishes_a_stopped_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny(Mode::Interleave, &dir.path().join("run"));
    cfg.max_rl_steps = Some(4);
    let path = dir.path().join("c.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = mifo(&["train", "--config", path.to_str().unwrap()]);
    let v = json_line(&out.stdout);
    assert_eq!(v["finished"], false);
    assert_eq!(v["rl_steps"], 4);
    let ckpt = v["checkpoint"].as_str().unwrap().to_string();

    cfg.max_rl_steps = None;
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = mifo(&["train", "--config", path.to_str().unwrap(), "--resume", &ckpt]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_line(&out.stdout)["finished"], true);
}

#[test]
fn output_dir_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), Mode::RlOnly);
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_mifo"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env(OUTPUT_DIR_ENV, &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(elsewhere.join("metrics.jsonl").exists());
    assert!(!dir.path().join("run").exists());
    let (records, bad) = read_metrics(&elsewhere.join("metrics.jsonl")).unwrap();
    assert_eq!(bad, 0);
    assert!(!records.is_empty());
}

#[test]
fn probe_with_two_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny(Mode::RlOnly, &dir.path().join("a"));
    cfg.max_rl_steps = Some(2);
    let path = dir.path().join("c.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let a = json_line(&mifo(&["train", "--config", path.to_str().unwrap()]).stdout)["checkpoint"]
        .as_str()
        .unwrap()
        .to_string();
    cfg.max_rl_steps = None;
    cfg.output_dir = dir.path().join("b");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let b = json_line(&mifo(&["train", "--config", path.to_str().unwrap()]).stdout)["checkpoint"]
        .as_str()
        .unwrap()
        .to_string();
    for kind in ["prune", "magnitude", "selective-drop", "dr"] {
        let out = mifo(&["probe", kind, "--config", path.to_str().unwrap(), "--ckpt-a", &a, "--ckpt-b", &b]);
        assert!(out.status.success(), "{kind}: {}", String::from_utf8_lossy(&out.stderr));
        let v = json_line(&out.stdout);
        assert_eq!(v["probe"], kind);
        assert!(v["report"]["single"].is_object() || v["report"]["single"].is_array(), "{kind}: {v}");
    }
    // each probe appended one record to the stream of output_dir
    let (records, _) = read_metrics(&dir.path().join("b/metrics.jsonl")).unwrap();
    assert_eq!(records.iter().filter(|r| r.probe.is_some()).count(), 4);
    assert!(mifo::experiment::check_stream(&records).is_ok());
}

#[test]
fn errors_are_one_json_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<(Vec<String>, &str)> = vec![
        (vec!["train".into(), "--config".into(), "/nonexistent/c.json".into()], "io"),
        (vec!["eval".into(), "--ckpt".into(), "/nonexistent.ckpt".into(), "--split".into(), "eval".into(), "--k".into(), "1".into()], "checkpoint"),
        (vec!["bogus".into()], "usage"),
        (vec!["train".into()], "usage"),
    ];
    for (args, kind) in cases {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = mifo(&a);
        assert!(!out.status.success(), "{args:?}");
        let v = json_line(&out.stderr);
        assert_eq!(v["error"], kind, "{args:?}: {v}");
        assert!(v["message"].is_string());
        assert!(out.stdout.is_empty());
    }

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"mode": "mifo", "unknown_key": 1}"#).unwrap();
    let out = mifo(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json_line(&out.stderr)["error"], "config");

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = mifo(&["eval", "--ckpt", junk.to_str().unwrap(), "--split", "eval", "--k", "1"]);
    assert_eq!(json_line(&out.stderr)["error"], "checkpoint");

    let cfg = write_config(dir.path(), Mode::Mifo);
    let out = mifo(&["probe", "nonsense", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(json_line(&out.stderr)["error"], "invalid");
    let out = mifo(&["eval", "--ckpt", junk.to_str().unwrap(), "--split", "holdout", "--k", "1"]);
    assert!(!out.status.success());
}
