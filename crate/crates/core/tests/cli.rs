//! End-to-end tests of the `open-rebalance` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run(command: &str, config: &str, dir: &Path, out: &str) -> Output {
    let path = dir.join(format!("{out}.json"));
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_open-rebalance"))
        .args([command, "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.join(out))
        .output()
        .unwrap()
}

fn ok(output: &Output) {
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

fn read_csv(path: PathBuf) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![reader.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(
        reader
            .records()
            .map(|r| r.unwrap().iter().map(String::from).collect()),
    );
    rows
}

const TASK: &str = r#"{"source": "synthetic", "num_classes": 3, "dim": 4, "n_max": 60, "ratio": 10, "test_per_class": 10, "seed": 2}"#;
const SCHEDULE: &str = r#"{"base_lr": 0.05, "warmup_epochs": 1, "milestones": [2], "decay_factor": 0.1, "total_epochs": 3}"#;

#[test]
fn synth_manifest_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{"command": "synth",
        "task": {"num_classes": 5, "dim": 6, "n_max": 500, "ratio": 100, "test_per_class": 4, "seed": 1},
        "aux": {"recipe": {"kind": "shifted-mixture", "margin": 2.0}, "size": 50, "seed": 1}}"#;
    ok(&run("synth", cfg, tmp.path(), "lt"));
    let manifest: Value =
        serde_json::from_slice(&fs::read(tmp.path().join("lt/manifest.json")).unwrap()).unwrap();
    // round(500 · 100^(-j/4)) recomputed by hand.
    let expected: Vec<u64> = (0..5)
        .map(|j| (500.0 * 100f64.powf(-(j as f64) / 4.0)).round() as u64)
        .collect();
    assert_eq!(expected, vec![500, 158, 50, 16, 5]);
    let counts: Vec<u64> = manifest["train_counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(counts, expected);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    for f in ["train.osds", "test.osds", "aux.osds"] {
        assert!(tmp.path().join("lt").join(f).exists(), "{f}");
    }
    let train = open_rebalance::data::read_dataset(tmp.path().join("lt/train.osds")).unwrap();
    assert_eq!(train.class_counts(), expected);

    let balanced = cfg.replace(r#""ratio": 100"#, r#""ratio": 1"#);
    ok(&run("synth", &balanced, tmp.path(), "bal"));
    let manifest: Value =
        serde_json::from_slice(&fs::read(tmp.path().join("bal/manifest.json")).unwrap()).unwrap();
    assert!(manifest["train_counts"]
        .as_array()
        .unwrap()
        .iter()
        .all(|v| v.as_u64() == Some(500)));

    let bad = cfg.replace(r#""ratio": 100"#, r#""ratio": 0.5"#);
    let out = run("synth", &bad, tmp.path(), "bad");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratio"));
}

#[test]
fn train_reduction_and_naming() {
    let tmp = tempfile::tempdir().unwrap();
    let standard = format!(
        r#"{{"command": "train", "dataset": {TASK},
            "train": {{"method": "standard", "hidden_dim": 5, "epochs": 3, "batch_train": 16, "schedule": {SCHEDULE}}},
            "seeds": [7]}}"#
    );
    let open = format!(
        r#"{{"command": "train", "dataset": {TASK},
            "aux": {{"recipe": {{"kind": "gaussian", "scale": 2.0}}, "size": 100, "seed": 1}},
            "train": {{"method": "open-sampling", "eta": 0.0, "hidden_dim": 5, "epochs": 3, "batch_train": 16, "schedule": {SCHEDULE}}},
            "seeds": [7]}}"#
    );
    ok(&run("train", &standard, tmp.path(), "std"));
    ok(&run("train", &open, tmp.path(), "os"));
    let strip_hash = |rows: Vec<Vec<String>>| {
        rows.into_iter()
            .map(|r| r[1..].to_vec())
            .collect::<Vec<_>>()
    };
    let a = read_csv(tmp.path().join("std/history_seed7.csv"));
    let b = read_csv(tmp.path().join("os/history_seed7.csv"));
    assert_eq!(a.len(), 4);
    assert_ne!(a[1][0], b[1][0], "different configs hash differently");
    assert_eq!(strip_hash(a), strip_hash(b));
    assert_eq!(
        fs::read(tmp.path().join("std/checkpoint_seed7.osnn")).unwrap(),
        fs::read(tmp.path().join("os/checkpoint_seed7.osnn")).unwrap()
    );

    let missing_aux = open.replace(
        r#""aux": {"recipe": {"kind": "gaussian", "scale": 2.0}, "size": 100, "seed": 1},"#,
        "",
    );
    let out = run("train", &missing_aux, tmp.path(), "noaux");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("auxiliary"));
    assert!(!tmp.path().join("noaux/result_seed7.json").exists());

    let five = standard.replace(r#""seeds": [7]"#, r#""seeds": [1, 2, 3, 4, 5]"#);
    ok(&run("train", &five, tmp.path(), "five"));
    for s in 1..=5 {
        let report: Value = serde_json::from_slice(
            &fs::read(tmp.path().join(format!("five/result_seed{s}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(report["seed"], s);
        assert_eq!(report["history"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn command_must_match_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        "train",
        r#"{"command": "bayes-check", "cases": 1, "seed": 0}"#,
        tmp.path(),
        "x",
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bayes-check"));
}

#[test]
fn sweep_rows_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"{{"command": "sweep", "dataset": {TASK},
            "aux": {{"recipe": {{"kind": "shifted-mixture", "margin": 2.0}}, "size": 100, "seed": 1}},
            "base": {{"method": "open-sampling", "hidden_dim": 4, "epochs": 3, "batch_train": 16, "schedule": {SCHEDULE}}},
            "seeds": [0, 1, 2],
            "grid": {{"eta": [0.0, 0.5, 1.0, 1.5]}}}}"#
    );
    ok(&run("sweep", &cfg, tmp.path(), "eta"));
    let rows = read_csv(tmp.path().join("eta/sweep.csv"));
    let header = &rows[0];
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let body = &rows[1..];
    let per_seed: Vec<_> = body.iter().filter(|r| r[col("seed")] != "all").collect();
    let summary: Vec<_> = body.iter().filter(|r| r[col("seed")] == "all").collect();
    assert_eq!(per_seed.len(), 12);
    assert_eq!(summary.len(), 4);
    for s in &summary {
        let accs: Vec<f64> = per_seed
            .iter()
            .filter(|r| r[col("point")] == s[col("point")])
            .map(|r| r[col("overall_acc")].parse().unwrap())
            .collect();
        let mean = accs.iter().sum::<f64>() / 3.0;
        let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!((s[col("overall_acc")].parse::<f64>().unwrap() - mean).abs() < 1e-12);
        assert!((s[col("overall_acc_std")].parse::<f64>().unwrap() - std).abs() < 1e-12);
        assert_eq!(s[col("runs")], "3");
    }

    let alpha = cfg.replace(
        r#""eta": [0.0, 0.5, 1.0, 1.5]"#,
        r#""alpha": ["M", "mcd", 0.9]"#,
    );
    ok(&run("sweep", &alpha, tmp.path(), "alpha"));
    let rows = read_csv(tmp.path().join("alpha/sweep.csv"));
    let labels: Vec<&str> = rows[1..]
        .iter()
        .filter(|r| r[6] == "all")
        .map(|r| r[3].as_str())
        .collect();
    assert_eq!(labels, ["M", "mcd", "0.9"]);

    let empty = cfg.replace(r#""eta": [0.0, 0.5, 1.0, 1.5]"#, "");
    let out = run("sweep", &empty, tmp.path(), "empty");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn eval_ood_table() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = r#"{"command": "synth",
        "task": {"num_classes": 3, "dim": 4, "n_max": 60, "ratio": 10, "test_per_class": 10, "seed": 2},
        "ood": [{"recipe": {"kind": "gaussian", "scale": 3.0}, "size": 40, "seed": 1},
                {"recipe": {"kind": "rademacher"}, "size": 40, "seed": 2}]}"#;
    ok(&run("synth", synth, tmp.path(), "data"));
    let train = format!(
        r#"{{"command": "train", "dataset": {{"source": "files", "train": {:?}, "test": {:?}}},
            "train": {{"method": "standard", "hidden_dim": 5, "epochs": 3, "batch_train": 16, "schedule": {SCHEDULE}}},
            "seeds": [0]}}"#,
        tmp.path().join("data/train.osds"),
        tmp.path().join("data/test.osds"),
    );
    ok(&run("train", &train, tmp.path(), "model"));
    let eval = format!(
        r#"{{"command": "eval-ood", "checkpoint": {:?}, "test": {:?},
            "pools": [{{"file": {:?}}}, {{"file": {:?}}}, {{"recipe": {{"kind": "blobs"}}, "size": 40, "seed": 3}}]}}"#,
        tmp.path().join("model/checkpoint_seed0.osnn"),
        tmp.path().join("data/test.osds"),
        tmp.path().join("data/ood_gaussian.osds"),
        tmp.path().join("data/ood_rademacher.osds"),
    );
    ok(&run("eval-ood", &eval, tmp.path(), "ood"));
    let rows = read_csv(tmp.path().join("ood/ood.csv"));
    assert_eq!(
        rows[0],
        [
            "config_hash",
            "pool",
            "fpr95",
            "auroc",
            "aupr",
            "aupr_positive"
        ]
    );
    let pools: Vec<&str> = rows[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(
        pools,
        ["ood_gaussian", "ood_rademacher", "blobs", "average"]
    );
    for c in 2..5 {
        let vals: Vec<f64> = rows[1..4].iter().map(|r| r[c].parse().unwrap()).collect();
        let avg: f64 = rows[4][c].parse().unwrap();
        assert!((avg - vals.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    ok(&run(
        "synth",
        &synth.replace(r#""dim": 4"#, r#""dim": 6"#),
        tmp.path(),
        "data6",
    ));
    let wrong_dim = eval.replace(
        &format!("{:?}", tmp.path().join("data/test.osds")),
        &format!("{:?}", tmp.path().join("data6/test.osds")),
    );
    let out = run("eval-ood", &wrong_dim, tmp.path(), "bad");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}

#[test]
fn bayes_check_reports() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&run(
        "bayes-check",
        r#"{"command": "bayes-check", "cases": 0, "seed": 0}"#,
        tmp.path(),
        "zero",
    ));
    let report: Value =
        serde_json::from_slice(&fs::read(tmp.path().join("zero/bayes_check.json")).unwrap())
            .unwrap();
    assert_eq!(report["cases_run"], 0);
    assert_eq!(report["violations"], 0);
    assert!(report["violating_cases"].as_array().unwrap().is_empty());

    let cfg = r#"{"command": "bayes-check", "cases": 1000, "seed": 5,
        "curve": {"source": [[0.5, 0.05], [0.25, 0.2]], "n": 100, "px": [0, 0, 1],
                  "alphas": ["mcd", "inf"], "ms": [50]}}"#;
    ok(&run("bayes-check", cfg, tmp.path(), "full"));
    let report: Value =
        serde_json::from_slice(&fs::read(tmp.path().join("full/bayes_check.json")).unwrap())
            .unwrap();
    assert_eq!(report["violations"], 0);
    assert!(report["stress"]["violations"].as_u64().unwrap() > 0);
    let curve = report["curve"].as_array().unwrap();
    assert_eq!(curve.len(), 2);
    // MCD with the required 50 auxiliary points balances the prior exactly.
    assert_eq!(curve[0]["alpha"], "mcd");
    assert!((curve[0]["imbalance_ratio"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(curve[0]["flipped_count"], 0);
}
