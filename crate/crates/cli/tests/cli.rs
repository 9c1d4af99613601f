use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dsmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsmoe"))
        .args(args)
        .output()
        .expect("spawn dsmoe")
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn stage(args: &[&str], out: &Path) -> Output {
    let config = smoke_config();
    let mut all = args.to_vec();
    all.extend([
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let o = dsmoe(&all);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = dsmoe(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = dsmoe(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "gen-corpus",
        "train",
        "attribute",
        "profile",
        "steer",
        "eval",
        "sweep",
        "report",
        "run",
    ] {
        let o = dsmoe(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        assert!(
            String::from_utf8_lossy(&o.stdout).contains("--config"),
            "{sub}"
        );
    }
}

#[test]
fn missing_artifact_gives_stage_tagged_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config();
    let o = dsmoe(&[
        "attribute",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[attribute]"));
}

#[test]
fn invalid_override_is_rejected() {
    let o = dsmoe(&["gen-corpus", "--alpha", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    stage(&["run"], dir.path());
    let seed = dir.path().join("seed-0");
    for f in [
        "corpus_train.jsonl",
        "corpus_eval.jsonl",
        "model.ckpt",
        "loss_curve.csv",
        "importance.jsonl",
        "trace.jsonl",
        "scores.json",
        "heatmap.csv",
        "steering.json",
        "results.csv",
        "predictions.jsonl",
        "run.json",
        "sweep_k.csv",
        "sweep_alpha.csv",
    ] {
        assert!(seed.join(f).is_file(), "{f}");
    }
    for f in [
        "spec.json",
        "results.csv",
        "report/summary_xent.csv",
        "report/token_ranking.jsonl",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn staged_commands_and_identity_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for sub in ["gen-corpus", "train", "attribute", "profile", "steer"] {
        stage(&[sub], out);
    }
    let seed = out.join("seed-0");

    let identity = out.join("identity.json");
    fs::write(
        &identity,
        fs::read_to_string(seed.join("steering.json"))
            .unwrap()
            .replace("\"alpha\": 3.0", "\"alpha\": 1.0"),
    )
    .unwrap();
    let with = out.join("with.csv");
    let without = out.join("without.csv");
    stage(
        &[
            "eval",
            "--steering",
            identity.to_str().unwrap(),
            "--results",
            with.to_str().unwrap(),
        ],
        out,
    );
    stage(&["eval", "--results", without.to_str().unwrap()], out);
    assert_eq!(fs::read(&with).unwrap(), fs::read(&without).unwrap());

    stage(
        &[
            "eval",
            "--steering",
            seed.join("steering.json").to_str().unwrap(),
        ],
        out,
    );
    stage(&["sweep"], out);
    fs::copy(seed.join("results.csv"), out.join("results.csv")).unwrap();
    let o = stage(&["report"], out);
    assert!(String::from_utf8_lossy(&o.stdout).contains("summary_xent.csv"));
}
