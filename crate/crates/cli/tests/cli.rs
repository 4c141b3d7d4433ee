//! End-to-end runs of the `dtmi` binary on small synthetic datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dtmi_cli::AblationRow;

fn dtmi(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtmi"))
        .args(args)
        .current_dir(cwd)
        .env("DTMI_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small model so that every command finishes in seconds.
const SMALL: &str = r#"{
  "input_size": 32, "embed_dim": 8, "depths": [1, 1, 1, 1], "num_heads": [1, 1, 2, 2],
  "decoder_width": 8, "batch_size": 2, "epochs": 2, "train_dir": "data/train"
}"#;

/// A workspace with a 4 + 2 scene dataset and the small config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = dtmi(
        &[
            "gen-data",
            "--out",
            "data",
            "--count",
            "4",
            "--holdout",
            "2",
            "--seed",
            "3",
            "--size",
            "32",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn train(dir: &Path, config: &str, name: &str) -> PathBuf {
    let o = dtmi(&["train", "--config", config, "--name", name], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("runs").join(name).join("last.ckpt")
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = dtmi(
            &["gen-data", "--out", out, "--count", "3", "--seed", "9", "--size", "32"],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert_eq!(a.len(), 3 * 3 + 1);
    assert_eq!(a, b);
}

#[test]
fn train_writes_checkpoints_and_log() {
    let dir = workspace();
    let ckpt = train(dir.path(), "small.json", "run1");
    let run = ckpt.parent().unwrap();
    for f in ["last.ckpt", "best.ckpt", "train_log.jsonl", "config.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "step", "L_s", "L_e", "L", "lr", "seconds"] {
        assert!(first.get(key).is_some(), "log lacks {key}");
    }
}

#[test]
fn train_reports_missing_ground_truth_directory() {
    let dir = workspace();
    fs::remove_dir_all(dir.path().join("data/train/gt")).unwrap();
    let o = dtmi(&["train", "--config", "small.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gt"), "{}", stderr(&o));
}

#[test]
fn resume_with_a_different_architecture_fails() {
    let dir = workspace();
    let ckpt = train(dir.path(), "small.json", "base");
    let wider = SMALL.replace("\"decoder_width\": 8", "\"decoder_width\": 16");
    fs::write(dir.path().join("wider.json"), wider).unwrap();
    let o = dtmi(
        &[
            "train",
            "--config",
            "wider.json",
            "--resume",
            ckpt.to_str().unwrap(),
            "--name",
            "r",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("decoder_width"), "{}", stderr(&o));
}

#[test]
fn invalid_config_and_unknown_flags_exit_with_one() {
    let dir = workspace();
    fs::write(dir.path().join("typo.json"), r#"{"windw_size": 4}"#).unwrap();
    let o = dtmi(&["train", "--config", "typo.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("windw_size"));
    assert_eq!(dtmi(&["train", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(dtmi(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn predict_writes_maps_and_reports_latency() {
    let dir = workspace();
    let ckpt = train(dir.path(), "small.json", "p");
    let o = dtmi(
        &[
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--rgb",
            "data/test/rgb/scene_00004.png",
            "--depth",
            "data/test/depth/scene_00004.png",
            "--out",
            "out/pred.png",
            "--benchmark",
            "10",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 1, "{lines:?}");
    let value: f64 = lines[0].strip_prefix("mean_inference_s=").unwrap().parse().unwrap();
    assert!(value > 0.0);
    let img = image::open(dir.path().join("out/pred.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
    assert!(dir.path().join("out/pred.edge.png").exists());
}

#[test]
fn predict_without_depth_works_for_rgb_only_and_fails_otherwise() {
    let dir = workspace();
    let full = train(dir.path(), "small.json", "full");
    let args = |ckpt: &Path| {
        vec![
            "predict".to_string(),
            "--checkpoint".into(),
            ckpt.to_str().unwrap().into(),
            "--rgb".into(),
            "data/test/rgb/scene_00005.png".into(),
            "--out".into(),
            "o.png".into(),
        ]
    };
    let a = args(&full);
    let o = dtmi(&refs(&a), dir.path());
    assert_eq!(o.status.code(), Some(1));

    let rgb_only = SMALL.replace(
        "\"epochs\": 2",
        "\"epochs\": 1, \"variant\": \"rgb_only\", \"cmi_stages\": []",
    );
    fs::write(dir.path().join("rgb.json"), rgb_only).unwrap();
    let ckpt = train(dir.path(), "rgb.json", "rgb");
    let a = args(&ckpt);
    let o = dtmi(&refs(&a), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("o.png").exists());
}

#[test]
fn eval_writes_report_and_is_reproducible() {
    let dir = workspace();
    let ckpt = train(dir.path(), "small.json", "e");
    let ck = ckpt.to_str().unwrap();
    for out in ["ev1", "ev2"] {
        let o = dtmi(
            &["eval", "--checkpoint", ck, "--data", "data/test", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ev1/report.json")).unwrap()).unwrap();
    for key in ["mae", "f_max", "s_measure", "pr_curve_csv"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(report["n_images"], 2);
    let csv = fs::read_to_string(dir.path().join("ev1/report_pr_curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 257);
    assert_eq!(tree(&dir.path().join("ev1")), tree(&dir.path().join("ev2")));

    fs::create_dir_all(dir.path().join("empty")).unwrap();
    let o = dtmi(
        &["eval", "--checkpoint", ck, "--data", "empty", "--out", "ev3"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_reports_rows_and_rejects_unknown_names_before_training() {
    let dir = workspace();
    let quick = SMALL.replace("\"epochs\": 2", "\"epochs\": 1");
    fs::write(dir.path().join("quick.json"), quick).unwrap();
    let o = dtmi(
        &[
            "ablate",
            "--config",
            "quick.json",
            "--variants",
            "full,cmi_ab",
            "--data",
            "data",
            "--out",
            "ab0",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cmi_ab"));
    assert!(!dir.path().join("ab0").exists(), "training started before validation");

    let o = dtmi(
        &[
            "ablate",
            "--config",
            "quick.json",
            "--variants",
            "full,no_edge,rgb_only",
            "--data",
            "data",
            "--out",
            "ab",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table: BTreeMap<String, AblationRow> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ab/ablation.json")).unwrap()).unwrap();
    assert_eq!(table.len(), 3);
    assert!(table["full"].params > table["no_edge"].params);
    assert!(table["rgb_only"].params < table["full"].params);
}

#[test]
fn metrics_command_scores_and_checks_stems() {
    let dir = workspace();
    let o = dtmi(
        &[
            "metrics",
            "--pred",
            "data/test/gt",
            "--gt",
            "data/test/gt",
            "--out",
            "m/report.json",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m/report.json")).unwrap()).unwrap();
    assert_eq!(report["mae"], 0.0);
    assert_eq!(report["f_max"], 1.0);

    let o = dtmi(
        &[
            "metrics",
            "--pred",
            "data/train/gt",
            "--gt",
            "data/test/gt",
            "--out",
            "m2.json",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn numerical_failures_map_to_exit_code_two() {
    let numeric = anyhow::Error::from(dtmi_core::Error::NonFiniteLoss { epoch: 0, batch: 3 });
    assert_eq!(dtmi_cli::exit_code(&numeric), 2);
    let data = anyhow::Error::from(dtmi_core::Error::Dataset("x".into()));
    assert_eq!(dtmi_cli::exit_code(&data), 1);
}
