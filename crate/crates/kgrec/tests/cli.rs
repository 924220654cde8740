//! Integration tests of the command-line interface, driving the compiled
//! binary end to end in temporary directories.

use std::path::Path;
use std::process::{Command, Output};

fn kgrec(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgrec"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should run")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny dataset flags shared by the training tests.
const FAST_TRAIN: &[&str] = &["--epochs", "2", "--dim", "8", "--batch-size", "128"];

fn gen_data(dir: &Path) {
    let out = kgrec(
        &[
            "--out", "data", "gen-synth", "--users", "60", "--items", "40", "--entities", "16",
            "--clusters", "2", "--intra-prob", "0.3",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
}

fn data_args(dir: &Path) -> Vec<String> {
    vec![
        "--interactions".into(),
        dir.join("data/interactions.tsv").to_str().unwrap().into(),
        "--kg".into(),
        dir.join("data/kg.tsv").to_str().unwrap().into(),
    ]
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    for flag in ["--help", "--version"] {
        let out = kgrec(&[flag], tmp.path());
        assert!(out.status.success(), "{flag}");
    }
    let out = kgrec(&["train", "--help"], tmp.path());
    assert!(out.status.success());
    assert!(stdout(&out).contains("--interactions"));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    // no subcommand
    assert_eq!(kgrec(&[], tmp.path()).status.code(), Some(1));
    // unknown flag fails fast
    assert_eq!(kgrec(&["gen-synth", "--no-such-flag"], tmp.path()).status.code(), Some(1));
    // unknown subcommand
    assert_eq!(kgrec(&["frobnicate"], tmp.path()).status.code(), Some(1));
    // invalid parameter value caught by validation
    gen_data(tmp.path());
    let mut args: Vec<String> = vec!["train".into()];
    args.extend(data_args(tmp.path()));
    args.extend(["--epochs".into(), "0".into()]);
    let out = kgrec(&args.iter().map(String::as_str).collect::<Vec<_>>(), tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn missing_data_files_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kgrec(
        &["train", "--interactions", "no/such.tsv", "--kg", "also/missing.tsv"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("error"));
}

#[test]
fn gen_train_eval_diffuse_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    gen_data(tmp.path());
    assert!(tmp.path().join("data/interactions.tsv").exists());
    assert!(tmp.path().join("data/kg.tsv").exists());
    assert!(tmp.path().join("data/labels.tsv").exists());

    let mut args: Vec<String> = vec!["--out".into(), "run".into(), "train".into()];
    args.extend(data_args(tmp.path()));
    args.extend(FAST_TRAIN.iter().map(|s| s.to_string()));
    let out = kgrec(&args.iter().map(String::as_str).collect::<Vec<_>>(), tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("final Recall@20"));
    assert!(tmp.path().join("run/model.ckpt").exists());
    assert!(tmp.path().join("run/metrics.json").exists());
    // resolved-config snapshot records the effective settings
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run/config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["epochs"], 2);
    assert_eq!(cfg["dim"], 8);

    let mut args: Vec<String> = vec!["--out".into(), "run".into(), "eval".into()];
    args.extend(data_args(tmp.path()));
    args.extend(["--checkpoint".into(), tmp.path().join("run/model.ckpt").to_str().unwrap().into()]);
    let out = kgrec(&args.iter().map(String::as_str).collect::<Vec<_>>(), tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("model"));
    assert!(text.contains("popularity"));
    assert!(text.contains("random"));

    let mut args: Vec<String> = vec!["--out".into(), "run".into(), "diffuse".into()];
    args.extend(data_args(tmp.path()));
    args.extend(["--checkpoint".into(), tmp.path().join("run/model.ckpt").to_str().unwrap().into()]);
    let out = kgrec(&args.iter().map(String::as_str).collect::<Vec<_>>(), tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("run/kg_denoised.tsv").exists());
}

#[test]
fn config_file_is_used_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    gen_data(tmp.path());
    std::fs::write(tmp.path().join("run.conf"), "epochs = 5\ndim = 8\nbatch_size = 128\n").unwrap();

    let mut args: Vec<String> = vec!["--out".into(), "run".into(), "train".into()];
    args.extend(data_args(tmp.path()));
    args.extend([
        "--config".into(),
        tmp.path().join("run.conf").to_str().unwrap().into(),
        "--epochs".into(),
        "2".into(),
    ]);
    let out = kgrec(&args.iter().map(String::as_str).collect::<Vec<_>>(), tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run/config.json")).unwrap())
            .unwrap();
    // flag overrides the file, the file overrides the default
    assert_eq!(cfg["epochs"], 2);
    assert_eq!(cfg["dim"], 8);

    // a bad config file is a usage error
    std::fs::write(tmp.path().join("bad.conf"), "no_such_key = 1\n").unwrap();
    let mut args: Vec<String> = vec!["train".into()];
    args.extend(data_args(tmp.path()));
    args.extend(["--config".into(), tmp.path().join("bad.conf").to_str().unwrap().into()]);
    let out = kgrec(&args.iter().map(String::as_str).collect::<Vec<_>>(), tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn ablate_prints_all_four_variants() {
    let tmp = tempfile::tempdir().unwrap();
    gen_data(tmp.path());
    let mut args: Vec<String> = vec!["--out".into(), "run".into(), "ablate".into()];
    args.extend(data_args(tmp.path()));
    args.extend(FAST_TRAIN.iter().map(|s| s.to_string()));
    let out = kgrec(&args.iter().map(String::as_str).collect::<Vec<_>>(), tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for variant in ["full", "no-attention", "no-guidance", "no-contrastive"] {
        assert!(text.contains(variant), "missing {variant} in:\n{text}");
    }
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run/ablation.json")).unwrap())
            .unwrap();
    assert_eq!(table.as_array().unwrap().len(), 4);
}

#[test]
fn default_output_dir_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kgrec"))
        .args(["gen-synth", "--users", "20", "--items", "15", "--entities", "8", "--clusters", "2"])
        .env("KGREC_OUT", tmp.path().join("envdir"))
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("envdir/interactions.tsv").exists());
}
