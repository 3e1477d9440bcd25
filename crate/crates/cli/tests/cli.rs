//! End-to-end command-line tests at micro scale: exit codes, artifact
//! round trips, and stage chaining.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tsvos"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn tsvos");
    assert!(
        out.status.success(),
        "tsvos {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_code(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().expect("spawn tsvos");
    (
        out.status.code().unwrap_or(-1),
        format!(
            "{}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        ),
    )
}

fn write_tiny_spec(dir: &Path) -> PathBuf {
    let path = dir.join("spec.json");
    std::fs::write(
        &path,
        serde_json::json!({
            "n_videos": 4,
            "frames_per_video": 5,
            "image_size": 32,
            "radius_min": 5.0,
            "radius_max": 8.0,
            "test_fraction": 0.25,
            "rng_seed": 5
        })
        .to_string(),
    )
    .unwrap();
    path
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        serde_json::json!({
            "image_size": 32,
            "enc_ch1": 4,
            "enc_ch2": 6,
            "key_dim": 4,
            "value_dim": 6,
            "dec_dim": 4,
            "batch_size": 2,
            "iters_stage1": 3,
            "iters_stage3": 3,
            "workers": 0,
            "rng_seed": 7
        })
        .to_string(),
    )
    .unwrap();
    path
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn gen_data_writes_dataset_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_spec(dir.path());
    let d1 = dir.path().join("d1");
    let d2 = dir.path().join("d2");
    let out = run_ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&d1)]);
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.contains("label fraction"), "stdout: {stdout}");
    assert!(d1.join("manifest.json").exists());
    assert!(d1.join("manifest_full.json").exists());
    assert!(d1.join("video_0000/frames/0000.png").exists());
    assert!(d1.join("video_0000/masks/0004.png").exists());

    run_ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&d2)]);
    let m1 = std::fs::read(d1.join("manifest.json")).unwrap();
    let m2 = std::fs::read(d2.join("manifest.json")).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn gen_data_strategy_is_reflected_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_spec(dir.path());
    let data = dir.path().join("data");
    run_ok(&[
        "gen-data",
        "--spec",
        &s(&spec),
        "--out",
        &s(&data),
        "--strategy",
        "first-last",
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["label_strategy"], "first_last");
    let v0 = &manifest["videos"][0];
    assert_eq!(v0["labeled_indices"], serde_json::json!([0, 4]));
}

#[test]
fn gen_data_rejects_bad_spec_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"n_videos": 0}"#).unwrap();
    let (code, msg) = run_code(&["gen-data", "--spec", &s(&bad), "--out", &s(&dir.path().join("x"))]);
    assert_eq!(code, 2, "message: {msg}");
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_spec(dir.path());
    let data = dir.path().join("data");
    run_ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&data)]);
    let bad = dir.path().join("bad_config.json");
    std::fs::write(&bad, r#"{"learning_rate": 0.0}"#).unwrap();
    let (code, msg) = run_code(&[
        "train", "--mode", "teacher", "--config", &s(&bad), "--data", &s(&data), "--out",
        &s(&dir.path().join("out")),
    ]);
    assert_eq!(code, 2, "message: {msg}");
}

#[test]
fn full_training_chain_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_spec(dir.path());
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    run_ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&data)]);

    // teacher
    run_ok(&[
        "train", "--mode", "teacher", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&out),
    ]);
    let teacher = out.join("teacher.ckpt");
    assert!(teacher.exists());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("teacher_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["seed"], 7);
    assert!(report["config_hash"].as_str().unwrap().len() >= 8);

    // pseudo-labeling with the trained teacher
    let labels = out.join("labels.json");
    let pseudo_out = run_ok(&[
        "pseudo", "--checkpoint", &s(&teacher), "--config", &s(&cfg), "--data", &s(&data),
        "--out", &s(&labels),
    ]);
    let stdout = String::from_utf8_lossy(&pseudo_out.stdout).to_string();
    assert!(stdout.contains("per-stream selection histogram"));
    assert!(labels.exists());
    // pseudo mask files land next to the ground truth
    assert!(data.join("video_0000/pseudo").exists());

    // re-train the student on the merged labels
    run_ok(&[
        "train", "--mode", "retrain", "--config", &s(&cfg), "--data", &s(&data), "--labels",
        &s(&labels), "--out", &s(&out),
    ]);
    assert!(out.join("student.ckpt").exists());

    // fully-supervised reference
    run_ok(&[
        "train", "--mode", "full", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&out),
    ]);
    assert!(out.join("fullsup.ckpt").exists());

    // vanilla baseline
    run_ok(&[
        "train", "--mode", "vanilla", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&out),
    ]);
    assert!(out.join("vanilla.ckpt").exists());

    // evaluation with saved masks
    let report_path = out.join("student_eval.json");
    let masks = out.join("pred_masks");
    run_ok(&[
        "eval", "--checkpoint", &s(&out.join("student.ckpt")), "--config", &s(&cfg), "--data",
        &s(&data), "--out", &s(&report_path), "--save-masks", &s(&masks),
    ]);
    assert!(report_path.exists());
    assert!(report_path.with_extension("csv").exists());
    let csv = std::fs::read_to_string(report_path.with_extension("csv")).unwrap();
    assert!(csv.starts_with("video_id,J,F,JF,DSC,HD\n"));
    assert!(masks.join("video_0003/0001.png").exists());

    // plots: comparison table + qualitative strip
    let plots = out.join("plots");
    run_ok(&[
        "plot", "--reports", &s(&report_path), &s(&report_path), &s(&report_path), "--labels",
        "a,b,c", "--out", &s(&plots), "--data", &s(&data), "--pred", &s(&masks), "--every", "2",
    ]);
    assert!(plots.join("comparison.md").exists());
    assert!(plots.join("comparison.csv").exists());
    let strips: Vec<_> = std::fs::read_dir(&plots)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("strip_"))
        .collect();
    assert!(!strips.is_empty());
}

#[test]
fn oracle_pseudo_reproduces_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_spec(dir.path());
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    run_ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&data)]);
    let labels = dir.path().join("oracle_labels.json");
    let out = run_ok(&[
        "pseudo", "--checkpoint", "oracle", "--config", &s(&cfg), "--data", &s(&data), "--out",
        &s(&labels),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(
        stdout.contains("oracle merged DSC vs ground truth: 1.0000"),
        "stdout: {stdout}"
    );
    // histogram sums to the number of unlabeled frames: 3 train videos x 3
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&labels).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn oracle_eval_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_spec(dir.path());
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    run_ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&data)]);
    let report_path = dir.path().join("oracle_eval.json");
    run_ok(&[
        "eval", "--checkpoint", "oracle", "--config", &s(&cfg), "--data", &s(&data), "--out",
        &s(&report_path),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["mean"]["j"], 100.0);
    assert_eq!(report["mean"]["f"], 100.0);
    assert_eq!(report["mean"]["dsc"], 100.0);
    assert_eq!(report["mean"]["hd"], 0.0);
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_spec(dir.path());
    let data = dir.path().join("data");
    run_ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&data)]);
    let (code, msg) = run_code(&[
        "pseudo", "--checkpoint", &s(&dir.path().join("nope.ckpt")), "--data", &s(&data),
        "--out", &s(&dir.path().join("labels.json")),
    ]);
    assert_eq!(code, 3, "message: {msg}");
}

#[test]
fn mode_full_requires_full_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_spec(dir.path());
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    run_ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&data)]);
    std::fs::remove_file(data.join("manifest_full.json")).unwrap();
    let (code, msg) = run_code(&[
        "train", "--mode", "full", "--config", &s(&cfg), "--data", &s(&data), "--out",
        &s(&dir.path().join("out")),
    ]);
    assert_eq!(code, 2, "message: {msg}");
}

#[test]
fn env_seed_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_spec(dir.path());
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    run_ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&data)]);
    let o = bin()
        .env("TSVOS_SEED", "99")
        .args([
            "train", "--mode", "vanilla", "--config", &s(&cfg), "--data", &s(&data), "--out",
            &s(&out),
        ])
        .output()
        .unwrap();
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("vanilla_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["seed"], 99);
}

#[test]
fn pipeline_resumes_from_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_spec(dir.path());
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let out = dir.path().join("pipe");
    run_ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&data)]);

    let first = run_ok(&[
        "pipeline", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&out),
    ]);
    let stdout = String::from_utf8_lossy(&first.stdout).to_string();
    assert!(stdout.contains("teacher"), "stdout: {stdout}");
    assert!(out.join("teacher.ckpt").exists());
    assert!(out.join("pseudo_manifest.json").exists());
    assert!(out.join("student.ckpt").exists());
    assert!(out.join("eval_report.json").exists());

    // deleting only the stage-3 artifact reruns only stage 3 (and eval)
    std::fs::remove_file(out.join("student.ckpt")).unwrap();
    let second = run_ok(&[
        "pipeline", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&out),
    ]);
    let stdout = String::from_utf8_lossy(&second.stdout).to_string();
    assert!(
        stdout.contains("resumed from artifacts: teacher, pseudo"),
        "stdout: {stdout}"
    );
    assert!(stdout.contains("stages run: retrain, eval"), "stdout: {stdout}");
}

#[test]
fn pipeline_reports_are_bitwise_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_spec(dir.path());
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    run_ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&data)]);
    let o1 = dir.path().join("run1");
    let o2 = dir.path().join("run2");
    run_ok(&["pipeline", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&o1)]);
    // pseudo masks written into the data root are regenerated identically
    run_ok(&["pipeline", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&o2)]);
    let r1 = std::fs::read(o1.join("eval_report.json")).unwrap();
    let r2 = std::fs::read(o2.join("eval_report.json")).unwrap();
    assert_eq!(r1, r2);
}
