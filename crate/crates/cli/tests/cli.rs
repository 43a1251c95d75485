//! End-to-end checks of the binary: exit codes, file outputs, overrides.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scpl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scpl"))
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn simulate_reference_config_reports_expected_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let out = scpl()
        .args(["simulate", "--config"])
        .arg(repo_config("table10.toml"))
        .args(["--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stdout(&out).contains("strategy=nmp makespan=51"));

    let out = scpl()
        .args(["simulate", "--config"])
        .arg(repo_config("table10.toml"))
        .args(["--strategy", "scpl_gpipe", "--micro-batches", "3", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    let text = stdout(&out);
    assert!(text.contains("makespan=22"));
    assert!(text.contains("speedup_vs_nmp=2.32"));
    assert!(dir.path().join("gantt_scpl_gpipe.json").exists());
}

#[test]
fn simulate_all_strategies_matches_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = scpl()
        .args(["simulate", "--config"])
        .arg(repo_config("table10.toml"))
        .arg("--all-strategies")
        .args(["--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    for line in [
        "strategy=nmp makespan=51",
        "strategy=gpipe makespan=31",
        "strategy=scpl makespan=24",
        "strategy=scpl_gpipe makespan=22",
        "speedup_vs_nmp=1.65",
        "speedup_vs_nmp=2.13",
        "speedup_vs_nmp=2.32",
    ] {
        assert!(text.contains(line), "missing {line:?} in:\n{text}");
    }
}

#[test]
fn train_writes_metrics_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = scpl()
        .args(["train", "--config"])
        .arg(repo_config("blobs_scpl.toml"))
        .args(["--out-dir"])
        .arg(dir.path())
        .args([
            "--set",
            "train.epochs=3",
            "--set",
            "data.per_class=30",
            "--set",
            "train.batch_size=16",
            "--set",
            "train.tau=0.2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "one record per epoch");
    let echoed = std::fs::read_to_string(dir.path().join("config.resolved.toml")).unwrap();
    assert!(echoed.contains("tau = 0.2"), "override must land in the echo");
    assert!(dir.path().join("checkpoint.bin").exists());
    assert!(dir.path().join("summary.csv").exists());
    assert!(stdout(&out).contains("final test accuracy"));
}

#[test]
fn strategy_override_flips_trainer() {
    let dir = tempfile::tempdir().unwrap();
    let out = scpl()
        .args(["train", "--config"])
        .arg(repo_config("blobs_scpl.toml"))
        .args(["--out-dir"])
        .arg(dir.path())
        .args([
            "--set",
            "train.strategy=bp",
            "--set",
            "train.epochs=2",
            "--set",
            "data.per_class=24",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stdout(&out).contains("strategy=bp"));
    let echoed = std::fs::read_to_string(dir.path().join("config.resolved.toml")).unwrap();
    assert!(echoed.contains("strategy = \"bp\""));
}

#[test]
fn config_errors_exit_two() {
    // unknown key
    let out = scpl()
        .args(["train", "--config"])
        .arg(repo_config("blobs_scpl.toml"))
        .args(["--set", "train.no_such_key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // invalid generator parameters
    let out = scpl()
        .args(["gen-data", "--config"])
        .arg(repo_config("gen_blobs.toml"))
        .args(["--set", "gen.classes=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // missing config file
    let out = scpl()
        .args(["simulate", "--config", "/nonexistent.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_three() {
    // a subnormal temperature overflows the logit scaling on the first
    // batch; the run must abort with the divergence exit code
    let dir = tempfile::tempdir().unwrap();
    let out = scpl()
        .args(["train", "--config"])
        .arg(repo_config("blobs_scpl.toml"))
        .args(["--out-dir"])
        .arg(dir.path())
        .args([
            "--set",
            "train.tau=1e-320",
            "--set",
            "train.epochs=2",
            "--set",
            "data.per_class=12",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("diverged at epoch 0"), "{err}");
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let out = scpl().args(["gradcheck", "--cases", "10"]).output().unwrap();
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("[PASS] gradient_blocking"));
    assert!(text.contains("cross_component_grad_buffers=0"));
    assert!(!text.contains("[FAIL]"));

    let out = scpl()
        .args(["gradcheck", "--cases", "5", "--inject-relu-fault"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("[FAIL] relu"));
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let out = scpl()
            .args(["gen-data", "--config"])
            .arg(repo_config("gen_blobs.toml"))
            .args(["--out-dir"])
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = std::fs::read(dir_a.path().join("blobs.csv")).unwrap();
    let b = std::fs::read(dir_b.path().join("blobs.csv")).unwrap();
    assert_eq!(a, b);
    let sidecar: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir_a.path().join("blobs.csv.provenance.json")).unwrap(),
    )
    .unwrap();
    assert!(sidecar["checksum"].as_str().unwrap().starts_with("sha256:"));

    // and the generated file round-trips through the csv loader
    let loaded = scpl_core::data::load_csv(&dir_a.path().join("blobs.csv"), "label").unwrap();
    assert_eq!(loaded.len(), 900);
}

#[test]
fn bench_reports_examples_per_sec() {
    let out = scpl()
        .args(["bench", "--config"])
        .arg(repo_config("blobs_pipelined.toml"))
        .args([
            "--workers",
            "1,2",
            "--inflate-ms",
            "1",
            "--epochs",
            "2",
            "--set",
            "data.per_class=24",
            "--set",
            "train.batch_size=16",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("examples_per_sec"));
    assert!(text.contains("sequential"));
    assert!(text.contains("pipelined workers=2"));
}
