use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jsa_tod::eval::MetricsReport;
use jsa_tod_cli::{CliError, ExperimentConfig, Manifest, OracleReport};

fn jsa_tod(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jsa-tod"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn small_config(dir: &Path, world_seed: u64) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "world": { "seed": world_seed },
        "data": { "n_train": 80, "n_valid": 20, "n_test": 20, "seed": 5 },
        "train": {
            "epochs_sup": 2,
            "epochs_semi": 1,
            "label_proportion": 0.25,
            "batch_size": 8,
            "max_latent_len": 12,
        },
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn missing_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = jsa_tod(dir.path(), &["--config", "nope.json", "gen"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"train": {"epochs": 3}}"#).unwrap();
    let err = ExperimentConfig::load(Some(&dir.path().join("c.json"))).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn train_without_dataset_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path(), 7);
    let out = jsa_tod(dir.path(), &["--config", "config.json", "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path(), 7);
    let out = jsa_tod(dir.path(), &["--config", "config.json", "--sup-unsup-mix", "1", "gen"]);
    assert_eq!(out.status.code(), Some(2));
    let out = jsa_tod(dir.path(), &["--config", "config.json", "--method", "em", "gen"]);
    assert!(!out.status.success());
}

#[test]
fn gen_is_byte_identical_and_manifest_tracks_world() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path(), 7);
    for out in ["a", "b"] {
        ok(&jsa_tod(dir.path(), &["--config", "config.json", "--out", out, "gen"]));
    }
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt", "manifest.json"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }
    let manifest = |d: &str| -> Manifest { serde_json::from_slice(&read(dir.path().join(d).join("manifest.json"))).unwrap() };
    let a = manifest("a");
    assert_eq!((a.data_seed, a.n_train, a.n_valid, a.n_test), (5, 80, 20, 20));

    // a different data seed keeps the world hash
    let mut cfg: serde_json::Value = serde_json::from_slice(&read(dir.path().join("config.json"))).unwrap();
    cfg["data"]["seed"] = 6.into();
    std::fs::write(dir.path().join("c2.json"), cfg.to_string()).unwrap();
    ok(&jsa_tod(dir.path(), &["--config", "c2.json", "--out", "c", "gen"]));
    assert_eq!(manifest("c").world_hash, a.world_hash);
    assert_ne!(read(dir.path().join("c/train.jsonl")), read(dir.path().join("a/train.jsonl")));

    small_config(dir.path(), 8);
    ok(&jsa_tod(dir.path(), &["--config", "config.json", "--out", "d", "gen"]));
    assert_ne!(manifest("d").world_hash, a.world_hash);
}

#[test]
fn dataset_from_another_world_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path(), 7);
    ok(&jsa_tod(dir.path(), &["--config", "config.json", "gen"]));
    small_config(dir.path(), 8);
    let out = jsa_tod(dir.path(), &["--config", "config.json", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different world"));
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path(), 7);
    ok(&jsa_tod(dir.path(), &["--config", "config.json", "gen"]));
    for seed in ["1", "2"] {
        ok(&jsa_tod(dir.path(), &["--config", "config.json", "--seed", seed, "train"]));
    }
    let run1 = dir.path().join("runs/jsa-turn-seed1");
    let run2 = dir.path().join("runs/jsa-turn-seed2");
    let m1 = read(run1.join("metrics.csv"));
    assert_ne!(m1, read(run2.join("metrics.csv")));
    let rep = MetricsReport::read_csv(&run1.join("metrics.csv")).unwrap();
    assert_eq!(rep.rows.len(), 4);
    assert!(rep.rows[..3].iter().all(|r| r.split == "valid"));
    let test = rep.last("test").unwrap().clone();
    for f in ["p.ckpt", "q.ckpt", "state.json", "summary.json", "cache.jsonl", "grad_norms_jsa.csv"] {
        assert!(run1.join(f).exists(), "{f}");
    }

    ok(&jsa_tod(dir.path(), &["--config", "config.json", "--seed", "1", "eval"]));
    let eval: jsa_tod::eval::MetricsRow = serde_json::from_slice(&read(run1.join("eval.json"))).unwrap();
    assert_eq!((eval.combined, eval.latent_f1, eval.q_f1), (test.combined, test.latent_f1, test.q_f1));

    // resuming a finished run leaves its metrics unchanged
    ok(&jsa_tod(dir.path(), &["--config", "config.json", "--seed", "1", "train", "--resume"]));
    assert_eq!(read(run1.join("metrics.csv")), m1);

    // a full-supervision run goes through the same path
    ok(&jsa_tod(dir.path(), &["--config", "config.json", "--method", "sup", "--proportion", "1.0", "train"]));
    assert!(dir.path().join("runs/sup-seed0/metrics.csv").exists());
}

#[test]
fn ablation_table_has_three_labeled_rows_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path(), 7);
    ok(&jsa_tod(dir.path(), &["--config", "config.json", "gen"]));
    for out in ["a", "b"] {
        ok(&jsa_tod(dir.path(), &["--config", "config.json", "--out", out, "ablate-mis"]));
    }
    let a = read(dir.path().join("a/ablation.csv"));
    assert_eq!(a, read(dir.path().join("b/ablation.csv")));
    let mut r = csv::Reader::from_reader(&a[..]);
    let labels: Vec<String> = r.records().map(|rec| rec.unwrap()[0].to_string()).collect();
    assert_eq!(labels, ["Without MIS", "Session-level MIS", "Recursive turn-level MIS"]);
}

#[test]
fn oracle_check_passes_and_catches_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = jsa_tod(dir.path(), &["--out", "ok", "oracle-check"]);
    ok(&out);
    let report: OracleReport = serde_json::from_slice(&read(dir.path().join("ok/oracle_report.json"))).unwrap();
    assert!(report.passed);
    assert!(report.checks.iter().any(|c| c.name == "recursion"));
    for c in &report.checks {
        assert!(c.value.is_finite() && c.threshold.is_finite(), "{}", c.name);
    }

    let out = jsa_tod(dir.path(), &["--out", "bad", "oracle-check", "--inject-non-markov"]);
    assert_eq!(out.status.code(), Some(4));
    let report: OracleReport = serde_json::from_slice(&read(dir.path().join("bad/oracle_report.json"))).unwrap();
    let rec = report.checks.iter().find(|c| c.name == "recursion").unwrap();
    assert!(!rec.passed && !report.passed);
}
