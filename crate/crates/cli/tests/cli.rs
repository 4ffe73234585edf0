//! Black-box tests against the built `bundlegraph` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bundlegraph_core::dataset::{write_dataset, FILE_BI};
use bundlegraph_core::synthetic::planted_dataset;
use bundlegraph_core::views::{read_checkpoint, write_checkpoint, EmbeddingTable};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bundlegraph"));
    // Tests control configuration entirely through files and flags.
    for (key, _) in std::env::vars() {
        if key.starts_with("BUNDLEGRAPH_") {
            cmd.env_remove(key);
        }
    }
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn fixture_dir() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&planted_dataset(), &data).unwrap();
    (tmp, data)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL_RUN: &str = r#"
[model]
dim = 8

[train]
epochs = 3
batch_size = 16

[eval]
ks = [5, 20]
"#;

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn train_writes_checkpoint_log_and_report() {
    let (tmp, data) = fixture_dir();
    let cfg = write_config(tmp.path(), SMALL_RUN);
    let out_dir = tmp.path().join("out");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data-dir")
        .arg(&data)
        .arg("--output")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    for file in ["model.ckpt", "train_log.tsv", "report.txt", "report.tsv"] {
        assert!(out_dir.join(file).exists(), "{file} missing");
    }
    let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(report.contains("recall@5="), "report: {report}");
    assert!(report.contains("ndcg@20="), "report: {report}");
    let log = std::fs::read_to_string(out_dir.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3, "header plus one row per epoch");

    // Evaluating the fresh checkpoint reproduces the train-time report.
    let eval = bin()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .arg("--data-dir")
        .arg(&data)
        .arg("--output")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(eval.status.success(), "stderr: {}", stderr(&eval));
    assert_eq!(stdout(&eval), report);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let (tmp, data) = fixture_dir();
    let cfg = write_config(tmp.path(), SMALL_RUN);
    let run = |name: &str| -> (String, String) {
        let out_dir = tmp.path().join(name);
        let out = bin()
            .args(["train", "--deterministic", "--config"])
            .arg(&cfg)
            .arg("--data-dir")
            .arg(&data)
            .arg("--output")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        (
            std::fs::read_to_string(out_dir.join("model.ckpt")).unwrap(),
            std::fs::read_to_string(out_dir.join("train_log.tsv")).unwrap(),
        )
    };
    let (ckpt_a, log_a) = run("a");
    let (ckpt_b, log_b) = run("b");
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(log_a, log_b);
}

#[test]
fn invalid_config_reports_every_failure_and_writes_nothing() {
    let (tmp, data) = fixture_dir();
    let cfg = write_config(
        tmp.path(),
        r#"
[model]
dim = 0

[train]
tau = -1.0
lr = 0.0
"#,
    );
    let out_dir = tmp.path().join("out");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data-dir")
        .arg(&data)
        .arg("--output")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    let err = stderr(&out);
    for needle in ["dimension", "temperature", "learning rate"] {
        assert!(err.contains(needle), "missing {needle} in: {err}");
    }
    assert!(!out_dir.exists(), "invalid config must not create outputs");
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["stats", "--data-dir"])
        .arg(tmp.path().join("nowhere"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let (tmp, data) = fixture_dir();
    let cfg = write_config(tmp.path(), "[train]\nlearning_rate = 0.1\n");
    let out = bin()
        .args(["stats", "--config"])
        .arg(&cfg)
        .arg("--data-dir")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("learning_rate"), "stderr: {}", stderr(&out));
}

#[test]
fn env_overrides_file_and_flags_override_env() {
    let (tmp, data) = fixture_dir();
    let cfg = write_config(tmp.path(), SMALL_RUN);

    let out_env = tmp.path().join("env_run");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data-dir")
        .arg(&data)
        .arg("--output")
        .arg(&out_env)
        .env("BUNDLEGRAPH_TRAIN_EPOCHS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let log = std::fs::read_to_string(out_env.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2, "env override to 1 epoch: {log}");

    let out_flag = tmp.path().join("flag_run");
    let out = bin()
        .args(["train", "--epochs", "2", "--config"])
        .arg(&cfg)
        .arg("--data-dir")
        .arg(&data)
        .arg("--output")
        .arg(&out_flag)
        .env("BUNDLEGRAPH_TRAIN_EPOCHS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let log = std::fs::read_to_string(out_flag.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3, "flag override to 2 epochs: {log}");
}

#[test]
fn sparsify_derives_dataset_and_respects_force() {
    let (tmp, data) = fixture_dir();
    let full_len = std::fs::read_to_string(data.join(FILE_BI)).unwrap().lines().count();

    let run = |force: bool| {
        let mut cmd = bin();
        cmd.args(["sparsify", "--rate", "0.5", "--seed", "7", "--data-dir"]).arg(&data);
        if force {
            cmd.arg("--force");
        }
        cmd.output().unwrap()
    };
    let out = run(false);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let derived: Vec<PathBuf> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().contains("drop"))
        .collect();
    assert_eq!(derived.len(), 1, "expected one derived dir: {derived:?}");
    let kept = std::fs::read_to_string(derived[0].join(FILE_BI)).unwrap().lines().count();
    assert_eq!(kept, (full_len as f64 * 0.5).round() as usize);

    // Existing output refuses without --force, succeeds with it.
    let refuse = run(false);
    assert_eq!(refuse.status.code(), Some(3), "stderr: {}", stderr(&refuse));
    let forced = run(true);
    assert!(forced.status.success(), "stderr: {}", stderr(&forced));
}

#[test]
fn stats_prints_counts() {
    let (_tmp, data) = fixture_dir();
    let out = bin().args(["stats", "--data-dir"]).arg(&data).output().unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for needle in ["users=20", "bundles=10", "items=30"] {
        assert!(text.contains(needle), "missing {needle} in: {text}");
    }
}

#[test]
fn evaluate_rejects_mismatched_checkpoint() {
    let (tmp, data) = fixture_dir();
    // A checkpoint with the wrong entity counts and dimension.
    let table = EmbeddingTable::<f32>::xavier(3, 2, 4, 8, 1);
    let ckpt = tmp.path().join("wrong.ckpt");
    write_checkpoint(&table, 1, &ckpt).unwrap();
    let out = bin()
        .args(["evaluate", "--dim", "8", "--data-dir"])
        .arg(&data)
        .arg("--checkpoint")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("(20, 10, 30, 8)"), "expected shape missing: {err}");
    assert!(err.contains("(3, 2, 4, 8)"), "actual shape missing: {err}");
}

#[test]
fn evaluate_emits_decomposition_groups_and_diagnostics() {
    let (tmp, data) = fixture_dir();
    let cfg = write_config(tmp.path(), SMALL_RUN);
    let out_dir = tmp.path().join("out");
    let trained = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data-dir")
        .arg(&data)
        .arg("--output")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(trained.status.success(), "stderr: {}", stderr(&trained));

    let out = bin()
        .args([
            "evaluate",
            "--decompose",
            "--groups",
            "0,0.2,0.4,0.6,0.8,1.0",
            "--diagnostics",
            "--config",
        ])
        .arg(&cfg)
        .arg("--data-dir")
        .arg(&data)
        .arg("--output")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for needle in ["total.recall@20=", "ego.recall@20=", "cross.recall@20=", "group=[", "dispersion"] {
        assert!(text.contains(needle), "missing {needle} in: {text}");
    }

    // The checkpoint written by train reloads with the training dimensions.
    let (table, seed) = read_checkpoint::<f32>(&out_dir.join("model.ckpt")).unwrap();
    assert_eq!(seed, 2023);
    assert_eq!(
        (table.users.count(), table.bundles.count(), table.items.count(), table.dim()),
        (20, 10, 30, 8)
    );
}
