//! End-to-end exercises of the command-line interface: every subcommand
//! runs against a small JSON config, reports land where asked, and exit
//! codes reflect the asserted invariants.

use std::path::Path;
use std::process::Command;

fn write_config(dir: &Path, kind: &str, estimator: &str) -> std::path::PathBuf {
    let config = format!(
        r#"{{
  "kind": "{kind}",
  "space": {{"M": 2, "d": 1}},
  "mixture": {{
    "space": {{"M": 2, "d": 1}},
    "schedule": "linear",
    "t0": 0.05,
    "T": 0.95,
    "p0": [1.0, 0.0],
    "p1": [0.0, 1.0]
  }},
  "model": {{
    "feature_dim": 4,
    "n_positions": 4,
    "n_heads": 1,
    "attn_dim": 4,
    "ff_dim": 8,
    "n_blocks": 1
  }},
  "train": {{
    "n_samples": 4,
    "mc_draws_per_sample": 2,
    "time_points_per_draw": 2,
    "epochs": 3,
    "batch_size": 4,
    "seed": 7,
    "clip": {{"t0": 0.05, "T": 0.95}}
  }},
  "seeds": [1],
  "estimator": {estimator},
  "n_grid": [2, 4],
  "bound": {{
    "ode_steps": 200,
    "risk_grid_points": 9,
    "mc_paths": 100,
    "euler_h": 0.005
  }}
}}
"#
    );
    let path = dir.join(format!("{kind}.json"));
    std::fs::write(&path, config).unwrap();
    path
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dfm-lab"))
}

#[test]
fn verify_bounds_oracle_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bound-check", r#"{"type": "oracle"}"#);
    let out_dir = dir.path().join("out");
    let output = binary()
        .args(["verify-bounds", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    let report = out_dir.join("bound_report_seed1.json");
    assert!(report.exists());
    let text = std::fs::read_to_string(report).unwrap();
    assert!(text.contains("\"pass\": true"));
}

#[test]
fn verify_bounds_seed_override_and_csv_format() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bound-check", r#"{"type": "oracle"}"#);
    let out_dir = dir.path().join("out");
    let output = binary()
        .args(["verify-bounds", "--config"])
        .arg(&config)
        .args(["--seed", "9", "--format", "csv"])
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(output.status.success());
    let report = out_dir.join("bound_report_seed9.csv");
    let text = std::fs::read_to_string(report).unwrap();
    assert!(text.starts_with("key,value"));
    assert!(text.contains("pass,true"));
}

#[test]
fn simulate_writes_trajectory_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "simulate", r#"{"type": "oracle"}"#);
    let out_dir = dir.path().join("out");
    let output = binary()
        .args(["simulate", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(output.status.success());
    let trajectory = out_dir.join("trajectory_seed1.jsonl");
    let text = std::fs::read_to_string(trajectory).unwrap();
    let first = text.lines().next().unwrap();
    let line: serde_json::Value = serde_json::from_str(first).unwrap();
    assert!(line.get("t").is_some());
    assert!(line.get("state").is_some());
}

#[test]
fn train_writes_checkpoint_log_and_golden_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bound-check", r#"{"type": "train"}"#);
    let out_dir = dir.path().join("out");
    let output = binary()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(out_dir.join("model_seed1_coord0.json").exists());
    assert!(out_dir.join("golden_seed1_coord0.json").exists());
    let log = std::fs::read_to_string(out_dir.join("train_seed1_coord0.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3); // one line per epoch
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(line.get("epoch").is_some());
    assert!(line.get("loss").is_some());
    assert!(line.get("wallclock").is_some());

    // The written checkpoint round-trips through verify-bounds.
    let ckpt = out_dir.join("model_seed1_coord0.json");
    let estimator = format!(
        r#"{{"type": "checkpoints", "paths": ["{}"]}}"#,
        ckpt.display().to_string().replace('\\', "/")
    );
    let config2 = write_config(dir.path(), "bound-check", &estimator);
    let renamed = dir.path().join("from_ckpt.json");
    std::fs::rename(config2, &renamed).unwrap();
    let output = binary()
        .args(["verify-bounds", "--config"])
        .arg(&renamed)
        .output()
        .unwrap();
    // A barely-trained model still satisfies the asserted identities.
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn extension_check_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "extension-check", r#"{"type": "oracle"}"#);
    let output = binary()
        .args(["extension-check", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("interpolation [pass]"));
}

#[test]
fn rate_sweep_runs_tiny_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "rate-sweep", r#"{"type": "train"}"#);
    let out_dir = dir.path().join("out");
    let output = binary()
        .args(["rate-sweep", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    // A 3-epoch training on a point-mass target has no meaningful slope
    // guarantee; only the artifacts are checked here.
    assert!(out_dir.join("rate_sweep.json").exists());
    assert!(out_dir.join("rate_sweep_table.csv").exists());
    let table = std::fs::read_to_string(out_dir.join("rate_sweep_table.csv")).unwrap();
    assert!(table.starts_with("n,median_risk,median_tv"));
    drop(output);
}

#[test]
fn missing_config_is_an_error() {
    let output = binary()
        .args(["simulate", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert!(!output.status.success());
}
