use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_psg-ssl");

/// Smallest configuration that still exercises every stage.
const TINY: &str = r#"
seed = 5

[synth]
subject_count = 4
epochs_per_subject = 24

[backbone]
enc_dim = 8
enc_depth = 1
enc_heads = 2
dec_dim = 8
dec_depth = 1
dec_heads = 2
projection_hidden = [8, 4]
frame_size_s = 7.5
overlap = 0.0
epochs = 1
batch_size = 8

[fusion]
modalities = "eeg1+eog1"
mm_dim = 8
mm_depth = 1
mm_heads = 2
dec_dim = 8
dec_depth = 1
dec_heads = 2
projection_hidden = [8, 4]
epochs = 2
batch_size = 8

[downstream]
tasks = ["stage"]

[downstream.linear_probe]
epochs = 5
batch_size = 16

[downstream.finetune]
epochs = 1
batch_size = 8

[downstream.tcm]
context_length = 3

[eval]
fold_count = 4
pca_dims = 4
"#;

fn psg(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        std::fs::write(&config, TINY).unwrap();
    }
    Command::new(BIN)
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(dir.join("run"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = psg(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = psg(dir.path(), &["--set", "fusion.mm_widht=4", "gen-synth"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("error[config]") && err.contains("mm_widht"), "{err}");
    assert!(!dir.path().join("run/raw").exists());
}

#[test]
fn missing_artifact_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = psg(dir.path(), &["pretrain-fusion"]);
    assert_eq!(o.status.code(), Some(5));
    let err = stderr(&o);
    assert!(err.contains("error[dependency]") && err.contains("preprocess"), "{err}");
}

#[test]
fn scenario_three_needs_a_fraction_below_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = psg(dir.path(), &["train", "--scenario", "3"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn bad_flag_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = psg(dir.path(), &["--task", "snoring", "train", "--scenario", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tiny_pipeline_reruns_to_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-synth"]);
    ok(d, &["preprocess"]);
    ok(d, &["pretrain-backbone"]);
    ok(d, &["pretrain-fusion"]);
    let out = ok(d, &["train", "--scenario", "1"]);
    assert!(out.contains("results.csv"), "{out}");
    let run = d.join("run");
    let first = std::fs::read_to_string(run.join("results.csv")).unwrap();
    assert_eq!(first.lines().count(), 2, "{first}");

    // Same config and seed: rerunning upstream and downstream gives the same ledger.
    ok(d, &["pretrain-fusion"]);
    ok(d, &["train", "--scenario", "1"]);
    assert_eq!(std::fs::read_to_string(run.join("results.csv")).unwrap(), first);

    let resolved = std::fs::read_to_string(run.join("resolved/train-linear_probe.toml")).unwrap();
    assert!(resolved.contains("modalities = \"eeg1+eog1\""), "{resolved}");
    ok(d, &["evaluate"]);
    assert!(run.join("evaluation.csv").exists());
    ok(d, &["hypnogram"]);
    ok(d, &["plot-losses"]);
    let runs = std::fs::read_to_string(run.join("runs.csv")).unwrap();
    for cmd in ["gen-synth", "preprocess", "train", "evaluate", "hypnogram"] {
        assert!(runs.contains(cmd), "{cmd} missing from {runs}");
    }

    // A second directory with the same seed reproduces the ledger bit for bit.
    let other = tempfile::tempdir().unwrap();
    for args in [
        &["gen-synth"][..],
        &["preprocess"],
        &["pretrain-backbone"],
        &["pretrain-fusion"],
        &["train", "--scenario", "1"],
    ] {
        ok(other.path(), args);
    }
    assert_eq!(std::fs::read_to_string(other.path().join("run/results.csv")).unwrap(), first);
}
