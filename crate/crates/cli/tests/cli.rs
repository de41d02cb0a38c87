use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedmri(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmri"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, seed: u64) -> String {
    let out = dir.join("run").to_string_lossy().into_owned();
    let text = format!(
        r#"{{
  "clients": [
    {{
      "client_id": 0,
      "phantom_style": "ellipses",
      "intensity_mean": 0.5,
      "intensity_std": 0.15,
      "mask_spec": {{ "kind": "uniform1d", "acceleration": 2.0, "shape": [8, 8] }},
      "n_train": 4,
      "n_test": 2
    }}
  ],
  "rounds": 2,
  "local_epochs": 1,
  "batch": 4,
  "seed": {seed},
  "out_dir": "{out}"
}}"#
    );
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_metrics_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), 5);
    let out = fedmri(&["run", "--config", &config]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final mean psnr"), "stdout: {stdout}");

    let csv = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,client_id,psnr,ssim,bytes_up,bytes_down,wall_ms"
    );
    // rounds x clients data rows
    assert_eq!(lines.count(), 2);
    assert!(dir.path().join("run/summary.json").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), 5);
    let out = fedmri(&["run", "--config", &config, "--seed", "9"]);
    assert!(out.status.success());
    let summary = fs::read_to_string(dir.path().join("run/summary.json")).unwrap();
    assert!(summary.contains("\"seed\": 9"), "summary: {summary}");
}

#[test]
fn missing_config_file_fails() {
    let out = fedmri(&["run", "--config", "/nonexistent/config.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn unknown_config_key_fails_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"clients": [], "rouunds": 5}"#).unwrap();
    let out = fedmri(&["run", "--config", &path.to_string_lossy()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rouunds"), "stderr: {err}");
}

#[test]
fn masks_writes_a_loadable_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("mask.ftns");
    let out = fedmri(&[
        "masks",
        "--spec",
        r#"{"kind":"uniform1d","acceleration":3.0}"#,
        "--out",
        &out_path.to_string_lossy(),
        "--seed",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = fedmri_core::tensor::load_tensor(&out_path).unwrap();
    assert_eq!(t.shape(), &[64, 64]);
    assert!(t.data().iter().all(|&v| v == 0.0 || v == 1.0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("sampled fraction"), "stdout: {stdout}");
}

#[test]
fn masks_rejects_a_bad_spec() {
    let out = fedmri(&[
        "masks",
        "--spec",
        r#"{"kind":"uniform1d","acceleration":0.5}"#,
        "--out",
        "/tmp/never-written.ftns",
    ]);
    assert!(!out.status.success());
}

#[test]
fn compare_run_with_itself_gives_p_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), 7);
    assert!(fedmri(&["run", "--config", &config]).status.success());
    let run_dir = dir.path().join("run").to_string_lossy().into_owned();
    let out = fedmri(&["compare", "--a", &run_dir, "--b", &run_dir]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("client 0:"), "stdout: {stdout}");
    assert!(stdout.contains("p 1.0000"), "stdout: {stdout}");
}
