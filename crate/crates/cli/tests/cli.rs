//! Command-line behaviour: outputs, exit codes, determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ternq::checkpoint::read_checkpoint;
use ternq::codec::{compression_report, PackedModel};

const BIN: &str = env!("CARGO_BIN_EXE_ternq");

fn ternq(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, scheme: &str, iterations: usize) -> PathBuf {
    let path = dir.join(format!("{scheme}.json"));
    let json = format!(
        r#"{{
  "net": {{ "levels": 2, "base_channels": 4, "num_classes": 3, "scheme": "{scheme}" }},
  "train": {{ "iterations": {iterations}, "patch_size": 8, "batch_size": 2, "learning_rate": 0.001 }},
  "data": {{ "num_volumes": 4, "volume_size": 16, "train_fraction": 0.5 }},
  "output": {{ "dir": "{}", "name": "{scheme}" }}
}}"#,
        dir.join("out").display()
    );
    fs::write(&path, json).unwrap();
    path
}

fn train(dir: &Path, scheme: &str) -> PathBuf {
    let cfg = write_config(dir, scheme, 3);
    let o = ternq(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    cfg
}

#[test]
fn train_writes_packed_model_log_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "3DQ");
    let out = dir.path().join("out");
    for f in ["3DQ.3dqp", "3DQ.aux", "3DQ.train.csv", "3DQ.eval.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(out.join("3DQ.train.csv")).unwrap();
    assert!(log.starts_with("step,total_loss,dice_loss,ce_loss,mean_dice\n"));
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn full_precision_training_writes_raw_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "FULL");
    let out = dir.path().join("out");
    assert!(out.join("FULL.3dqr").exists());
    assert!(!out.join("FULL.3dqp").exists());
    let o = ternq(&["report", "--model", out.join("FULL.3dqr").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let total = stdout(&o).lines().find(|l| l.starts_with("total")).unwrap().to_string();
    assert!(total.trim_end().ends_with("1.00"), "{total}");
}

#[test]
fn missing_config_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = ternq(&["train", "--config", missing.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"iters": 5}}"#).unwrap();
    let o = ternq(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("iters"), "{}", stderr(&o));
}

#[test]
fn pack_unpack_pack_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "TTQ");
    let out = dir.path().join("out");
    let packed = out.join("TTQ.3dqp");
    let raw = out.join("raw.3dqr");
    let o = ternq(&["unpack", "--model", packed.to_str().unwrap(), "--out", raw.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let repacked = out.join("again.3dqp");
    let o = ternq(&["pack", "--model", raw.to_str().unwrap(), "--out", repacked.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&packed).unwrap(), fs::read(&repacked).unwrap());
    assert_eq!(fs::read(out.join("TTQ.aux")).unwrap(), fs::read(out.join("again.aux")).unwrap());

    // the printed size agrees with the compression report
    let model = PackedModel::from_bytes(&fs::read(&repacked).unwrap()).unwrap();
    let report = compression_report(&model);
    assert!(stdout(&o).contains(&format!("into {} bytes", report.packed_bytes)), "{}", stdout(&o));

    let raw2 = out.join("raw2.3dqr");
    ternq(&["unpack", "--model", repacked.to_str().unwrap(), "--out", raw2.to_str().unwrap()]);
    assert_eq!(fs::read(&raw).unwrap(), fs::read(&raw2).unwrap());
}

#[test]
fn corrupt_model_names_the_failed_check() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "BTQ");
    let packed = dir.path().join("out").join("BTQ.3dqp");
    let mut bytes = fs::read(&packed).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&packed, &bytes).unwrap();
    let o = ternq(&["report", "--model", packed.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("CRC"), "{}", stderr(&o));

    fs::write(&packed, b"XXXX").unwrap();
    let o = ternq(&["inspect", "--model", packed.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn eval_reports_dice_and_rejects_class_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = train(dir.path(), "3DQ");
    let model = dir.path().join("out").join("3DQ.3dqp");
    let csv = dir.path().join("eval.csv");
    let o = ternq(&["eval", "--model", model.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("mean foreground dice"));
    // evaluating the written model reproduces the scores computed at train time
    assert_eq!(fs::read(&csv).unwrap(), fs::read(dir.path().join("out").join("3DQ.eval.csv")).unwrap());

    let other = dir.path().join("two.json");
    fs::write(&other, r#"{"net": {"levels": 2, "num_classes": 2}, "train": {"patch_size": 8}, "data": {"volume_size": 16, "num_volumes": 4, "train_fraction": 0.5}}"#).unwrap();
    let o = ternq(&["eval", "--model", model.to_str().unwrap(), "--config", other.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("classes"), "{}", stderr(&o));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "3DQ", 2);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, seed) in [(&a, "1"), (&b, "2")] {
        let o = ternq(&["train", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_ne!(fs::read(a.join("3DQ.3dqp")).unwrap(), fs::read(b.join("3DQ.3dqp")).unwrap());
}

#[test]
fn inspect_lists_entries() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "3DQ");
    let model = dir.path().join("out").join("3DQ.3dqp");
    let o = ternq(&["inspect", "--model", model.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("\"scheme\": \"3DQ\""));
    assert!(text.contains("head.kernel"));
    let ck = read_checkpoint(&model).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains(" quantized ")).count(), ck.config.levels * 2 + 3 * (ck.config.levels - 1) + 1);
}

#[test]
fn gradient_check_flag_runs_suite() {
    let o = ternq(&["--double-check-grads"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("gamma (3DQ)"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn no_command_is_a_usage_error() {
    assert_eq!(code(&ternq(&[])), 2);
    assert_eq!(code(&ternq(&["frobnicate"])), 2);
}
