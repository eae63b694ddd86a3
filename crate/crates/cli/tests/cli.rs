use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL_CONFIG: &str = r#"{
  "seed": 1,
  "mixture": {
    "means": [[4.0, 0.0], [0.0, 4.0], [-4.0, 0.0], [0.0, -4.0]],
    "covariances": [
      [[0.2, 0.0], [0.0, 0.2]], [[0.2, 0.0], [0.0, 0.2]],
      [[0.2, 0.0], [0.0, 0.2]], [[0.2, 0.0], [0.0, 0.2]]
    ],
    "samples_per_class": 40
  },
  "msn": {"epochs": 3, "hidden": [16], "feature_dim": 8, "batch_size": 32},
  "diffusion": {"timesteps": 20, "hidden": [16], "train_steps": 200, "batch_size": 32},
  "pipeline": {"k": 8, "k_grid": [0, 4], "refinement_rounds": 1, "eval_samples_per_class": 20, "heldout_per_class": 20}
}"#;

const STAGES: [&str; 8] = [
    "gen-data",
    "train-classifier",
    "pseudo-label",
    "train-diffusion",
    "sample",
    "retrain-probe",
    "refine",
    "evaluate",
];

fn dpt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpt"))
        .current_dir(dir)
        .env_remove("DPT_OUTPUT_ROOT")
        .args(args)
        .output()
        .unwrap()
}

fn status(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("bad status {e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), SMALL_CONFIG).unwrap();
    dir
}

fn run_dir(dir: &Path, out: &Output) -> PathBuf {
    dir.join(status(out)["run_dir"].as_str().unwrap())
}

#[test]
fn run_pipeline_twice_gives_identical_manifests() {
    let dir = setup();
    let a = dpt(
        dir.path(),
        &[
            "run-pipeline",
            "--config",
            "c.json",
            "--seed",
            "7",
            "--output-root",
            "a",
        ],
    );
    let b = dpt(
        dir.path(),
        &[
            "run-pipeline",
            "--config",
            "c.json",
            "--seed",
            "7",
            "--output-root",
            "b",
        ],
    );
    assert!(a.status.success() && b.status.success());
    let ma = fs::read(run_dir(dir.path(), &a).join("manifest.json")).unwrap();
    let mb = fs::read(run_dir(dir.path(), &b).join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
    let manifest: Value = serde_json::from_slice(&ma).unwrap();
    assert_eq!(manifest["config"]["seed"], 7);
    assert_eq!(manifest["checks_passed"], true);
    assert!(run_dir(dir.path(), &a).ends_with(format!(
        "{}-seed7",
        &manifest["config_hash"].as_str().unwrap()[..12]
    )));
}

#[test]
fn stage_commands_reproduce_run_pipeline_artifacts() {
    let dir = setup();
    let whole = dpt(
        dir.path(),
        &["run-pipeline", "--config", "c.json", "--run-dir", "whole"],
    );
    assert!(whole.status.success());
    for stage in STAGES {
        let out = dpt(
            dir.path(),
            &[stage, "--config", "c.json", "--run-dir", "staged"],
        );
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(status(&out)["command"], stage);
    }
    let manifest: Value =
        serde_json::from_slice(&fs::read(dir.path().join("whole/manifest.json")).unwrap()).unwrap();
    for rel in manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
    {
        if rel == "timings.json" {
            continue;
        }
        let a = fs::read(dir.path().join("whole").join(rel)).unwrap();
        let b = fs::read(dir.path().join("staged").join(rel)).unwrap();
        assert!(a == b, "{rel} differs");
    }
}

#[test]
fn sample_one_class() {
    let dir = setup();
    for stage in [
        "gen-data",
        "train-classifier",
        "pseudo-label",
        "train-diffusion",
    ] {
        assert!(
            dpt(dir.path(), &[stage, "--config", "c.json", "--run-dir", "r"])
                .status
                .success()
        );
    }
    let out = dpt(
        dir.path(),
        &[
            "sample",
            "--config",
            "c.json",
            "--run-dir",
            "r",
            "--class",
            "3",
            "--n",
            "128",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(status(&out)["result"]["rows"], 128);
    let text = fs::read_to_string(dir.path().join("r/samples/class3_n128.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("class,x_1,x_2"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 128);
    assert!(rows.iter().all(|r| r.starts_with("3,")));

    let bad = dpt(
        dir.path(),
        &[
            "sample",
            "--config",
            "c.json",
            "--run-dir",
            "r",
            "--class",
            "9",
            "--n",
            "2",
        ],
    );
    assert!(!bad.status.success());
}

fn sorted_delta(path: &Path) -> Vec<(usize, f64)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("class,delta"));
    lines
        .map(|l| {
            let (c, d) = l.split_once(',').unwrap();
            (c.parse().unwrap(), d.parse().unwrap())
        })
        .collect()
}

#[test]
fn evaluate_writes_sorted_deltas_and_k_grid() {
    let dir = setup();
    for stage in &STAGES[..5] {
        assert!(
            dpt(dir.path(), &[stage, "--config", "c.json", "--run-dir", "r"])
                .status
                .success()
        );
    }
    let retrain = dpt(
        dir.path(),
        &[
            "retrain-probe",
            "--config",
            "c.json",
            "--run-dir",
            "r",
            "--k-grid",
            "2,12",
        ],
    );
    assert!(
        retrain.status.success(),
        "{}",
        String::from_utf8_lossy(&retrain.stderr)
    );
    assert!(dir.path().join("r/stage3/k12/probe.json").exists());
    assert!(dpt(
        dir.path(),
        &["refine", "--config", "c.json", "--run-dir", "r"]
    )
    .status
    .success());
    let eval = dpt(
        dir.path(),
        &[
            "evaluate",
            "--config",
            "c.json",
            "--run-dir",
            "r",
            "--k-grid",
            "2,12",
        ],
    );
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let by_k = &status(&eval)["result"]["metrics"]["heldout_accuracy"]["by_k"];
    for k in ["2", "8", "12"] {
        assert!(by_k[k].is_number(), "missing K={k} in {by_k}");
    }
    for split in ["heldout", "train"] {
        for which in ["recall", "precision"] {
            let deltas =
                sorted_delta(&dir.path().join(format!("r/eval/delta_{which}_{split}.csv")));
            assert!(!deltas.is_empty());
            assert!(deltas
                .windows(2)
                .all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
        }
    }
}

#[test]
fn error_exit_codes() {
    let dir = setup();
    let missing = dpt(
        dir.path(),
        &["pseudo-label", "--config", "c.json", "--run-dir", "empty"],
    );
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(status(&missing)["category"], "missing_artifact");

    let no_config = dpt(dir.path(), &["gen-data", "--config", "absent.json"]);
    assert_eq!(no_config.status.code(), Some(2));

    fs::write(
        dir.path().join("bad.json"),
        r#"{"seed": 1, "unknown_key": true}"#,
    )
    .unwrap();
    let bad = dpt(dir.path(), &["gen-data", "--config", "bad.json"]);
    assert_eq!(bad.status.code(), Some(3));
    assert_eq!(status(&bad)["category"], "config");

    let mut cfg: Value = serde_json::from_str(SMALL_CONFIG).unwrap();
    cfg["mixture"]["means"] =
        serde_json::json!([[1e300, 0.0], [-1e300, 0.0], [0.0, 1e300], [0.0, -1e300]]);
    fs::write(dir.path().join("huge.json"), cfg.to_string()).unwrap();
    assert!(dpt(
        dir.path(),
        &["gen-data", "--config", "huge.json", "--run-dir", "h"]
    )
    .status
    .success());
    let numeric = dpt(
        dir.path(),
        &[
            "train-classifier",
            "--config",
            "huge.json",
            "--run-dir",
            "h",
        ],
    );
    assert_eq!(numeric.status.code(), Some(4));
    assert_eq!(status(&numeric)["category"], "numeric");
}

#[test]
fn output_root_from_environment() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_dpt"))
        .current_dir(dir.path())
        .env("DPT_OUTPUT_ROOT", "from-env")
        .args(["gen-data", "--config", "c.json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(status(&out)["run_dir"]
        .as_str()
        .unwrap()
        .starts_with("from-env"));
    assert!(run_dir(dir.path(), &out).join("data/train.csv").exists());
}

#[test]
fn help_documents_seed_tags() {
    let dir = setup();
    let out = dpt(dir.path(), &["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in [
        "mixture",
        "split",
        "msn-train",
        "diffusion-sample",
        "run-pipeline",
        "retrain-probe",
    ] {
        assert!(text.contains(name), "--help lacks {name}");
    }
}
