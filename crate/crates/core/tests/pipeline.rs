//! End-to-end pipeline through the command-line binary: corpus generation,
//! task sampling, training, evaluation, the eta sweep, and checkpoint
//! inspection, plus exit-code and determinism contracts.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pudnet")
}

fn run_ok(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().expect("spawn pudnet");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_code(args: &[&str]) -> (i32, String) {
    let out = Command::new(bin()).args(args).output().expect("spawn pudnet");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        r#"
seed = 11

[corpus]
n_classes = 6
per_class = 24

[tasks]
n_way = 4
support = 4
query = 6
count = 12

[model]
width = 8
m = 12
p = 4
p_mid = 4
shots = 4
extractor_channels = [6, 8]

[train]
lr = 3e-3
batch_size = 24
epochs = 10
max_steps = 100

[eval]
baseline_epochs = [1, 3]
baseline_lr = 3e-3
"#,
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_smoke_under_budget() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let corpus = dir.path().join("corpus.pudc");
    let tasks = dir.path().join("tasks");
    let ckpt = dir.path().join("model.ckpt");
    let report = dir.path().join("report.csv");

    run_ok(&["gen-corpus", "--config", cfg, "--out", corpus.to_str().unwrap()]);
    assert!(corpus.exists());
    // resolved config echo written alongside
    assert!(dir.path().join("corpus.pudc.config.toml").exists());

    run_ok(&[
        "gen-tasks",
        "--config",
        cfg,
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        tasks.to_str().unwrap(),
    ]);
    assert!(tasks.join("tasks.pudt").exists());
    assert!(tasks.join("config-echo.toml").exists());

    run_ok(&[
        "train",
        "--config",
        cfg,
        "--tasks",
        tasks.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(ckpt.exists());
    let losses = dir.path().join("model.ckpt.losses.csv");
    assert!(losses.exists());
    let loss_text = std::fs::read_to_string(&losses).unwrap();
    assert!(loss_text.starts_with("step,task_id,l1,l2,l3,total\n"));
    assert_eq!(loss_text.lines().count(), 101, "header + 100 steps");

    run_ok(&[
        "eval",
        "--config",
        cfg,
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--tasks",
        tasks.to_str().unwrap(),
        "--baseline-epochs",
        "1,3",
        "--out",
        report.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("method,epochs,acc_mean,acc_std,seconds\n"));
    assert_eq!(text.lines().count(), 4, "header + pudnet + 2 baseline rows");

    let inspect = run_ok(&["inspect-ckpt", "--ckpt", ckpt.to_str().unwrap()]);
    assert!(inspect.contains("ahru/W_r"));
    assert!(inspect.contains("T_phi/conv0/w"));
    assert!(inspect.contains("head/W"));

    assert!(
        start.elapsed().as_secs_f64() < 300.0,
        "pipeline smoke exceeded its five-minute budget"
    );
}

#[test]
fn training_is_deterministic_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let corpus = dir.path().join("corpus.pudc");
    let tasks = dir.path().join("tasks");
    run_ok(&["gen-corpus", "--config", cfg, "--out", corpus.to_str().unwrap()]);
    run_ok(&[
        "gen-tasks",
        "--config",
        cfg,
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        tasks.to_str().unwrap(),
    ]);
    let mut csvs = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let ckpt = dir.path().join(name);
        run_ok(&[
            "train",
            "--config",
            cfg,
            "--tasks",
            tasks.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ]);
        let losses = dir.path().join(format!("{name}.losses.csv"));
        csvs.push(std::fs::read_to_string(losses).unwrap());
    }
    assert_eq!(csvs[0], csvs[1], "identical config+seed must give identical loss logs");
}

#[test]
fn corpora_regenerate_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a.pudc");
    let b = dir.path().join("b.pudc");
    run_ok(&["gen-corpus", "--config", cfg, "--out", a.to_str().unwrap()]);
    run_ok(&["gen-corpus", "--config", cfg, "--out", b.to_str().unwrap()]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn sweep_eta_emits_one_row_per_eta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let corpus = dir.path().join("corpus.pudc");
    let tasks = dir.path().join("tasks");
    let out = dir.path().join("sweep.csv");
    run_ok(&["gen-corpus", "--config", cfg, "--out", corpus.to_str().unwrap()]);
    run_ok(&[
        "gen-tasks",
        "--config",
        cfg,
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        tasks.to_str().unwrap(),
    ]);
    run_ok(&[
        "sweep-eta",
        "--config",
        cfg,
        "--tasks",
        tasks.to_str().unwrap(),
        "--eval-tasks",
        tasks.to_str().unwrap(),
        "--etas",
        "0.0,0.5,1.0",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("eta,acc_mean,acc_std\n"));
    assert_eq!(text.lines().count(), 4, "header + 3 eta rows");
}

#[test]
fn missing_file_exits_3() {
    let (code, stderr) = run_code(&["inspect-ckpt", "--ckpt", "/nonexistent/x.ckpt"]);
    assert_eq!(code, 3, "stderr: {stderr}");
    assert!(stderr.starts_with("error: "), "one-line machine-parsable error, got: {stderr}");
    assert_eq!(stderr.trim().lines().count(), 1);
}

#[test]
fn schema_violation_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nnot_a_field = 1\n").unwrap();
    let (code, stderr) = run_code(&[
        "gen-corpus",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("c.pudc").to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("not_a_field"), "error names the field path: {stderr}");
}

#[test]
fn subcommands_do_not_mutate_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let cfg_str = cfg.to_str().unwrap();
    let corpus = dir.path().join("corpus.pudc");
    run_ok(&["gen-corpus", "--config", cfg_str, "--out", corpus.to_str().unwrap()]);
    let before = std::fs::read(&corpus).unwrap();
    let tasks = dir.path().join("tasks");
    run_ok(&[
        "gen-tasks",
        "--config",
        cfg_str,
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        tasks.to_str().unwrap(),
    ]);
    assert_eq!(before, std::fs::read(&corpus).unwrap());
    let cfg_before = std::fs::read(&cfg).unwrap();
    assert_eq!(cfg_before, std::fs::read(&cfg).unwrap());
}
