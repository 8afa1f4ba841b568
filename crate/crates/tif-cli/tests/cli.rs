//! End-to-end tests of the command-line surface: exit codes, file outputs,
//! idempotency and input immutability.

use std::path::Path;
use std::process::{Command, Output};

fn tif() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tif"))
}

fn run(args: &[&str]) -> Output {
    tif().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_generator_spec(path: &Path, n_test_months: u32, seed: u64) {
    let months = 3 + n_test_months;
    let spec = serde_json::json!({
        "dim": 32,
        "start_month": "2014-01",
        "n_train_months": 3,
        "n_test_months": n_test_months,
        "samples_per_month": 80,
        "benign_malware_ratio": 4.0,
        "n_families": 1,
        "family_schedule": vec![vec![1.0]; months as usize],
        "stable_features": [
            {"index": 0, "p_benign": 0.05, "p_malware": 0.8},
            {"index": 1, "p_benign": 0.05, "p_malware": 0.8}
        ],
        "unstable_features": [
            {"index": 2, "p_benign": 0.05, "p_malware_initial": 0.9,
             "drift_month": 1, "p_malware_final": 0.05}
        ],
        "family_features": [],
        "noise_features": [
            {"index": 5, "p_both": 0.2},
            {"index": 6, "p_both": 0.1}
        ],
        "seed": seed
    });
    std::fs::write(path, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();
}

fn write_train_config(path: &Path, seed: u64, extra: &[(&str, serde_json::Value)]) {
    let mut cfg = serde_json::json!({
        "total_epochs": 4,
        "stage1_epochs": 2,
        "batch_size_per_env": 16,
        "encoder_widths": [16, 8],
        "head_hidden": [4],
        "weights": {"proxies_per_class": 2},
        "train_months": 3,
        "seed": seed
    });
    for (k, v) in extra {
        cfg[k] = v.clone();
    }
    std::fs::write(path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
}

fn dir_bytes(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names
        .iter()
        .map(|n| std::fs::read(dir.join(n)).unwrap_or_default())
        .collect()
}

#[test]
fn generate_is_idempotent_and_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    write_generator_spec(&spec, 2, 7);

    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    assert_ok(&run(&["generate", "--config", spec.to_str().unwrap(), "--out", out_a.to_str().unwrap(), "--quiet"]));
    assert_ok(&run(&["generate", "--config", spec.to_str().unwrap(), "--out", out_b.to_str().unwrap(), "--quiet"]));

    for name in ["meta.json", "samples.jsonl"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    write_generator_spec(&spec, 1, 7);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    assert_ok(&run(&["generate", "--config", spec.to_str().unwrap(), "--out", out_a.to_str().unwrap(), "--seed", "99", "--quiet"]));
    assert_ok(&run(&["generate", "--config", spec.to_str().unwrap(), "--out", out_b.to_str().unwrap(), "--quiet"]));
    let a = std::fs::read(out_a.join("samples.jsonl")).unwrap();
    let b = std::fs::read(out_b.join("samples.jsonl")).unwrap();
    assert_ne!(a, b, "seed override should change the sample stream");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["seed_source"], "flag");
}

#[test]
fn pipeline_evaluate_nine_month_range_yields_nine_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    write_generator_spec(&spec, 9, 3);
    let data = tmp.path().join("data");
    assert_ok(&run(&["generate", "--config", spec.to_str().unwrap(), "--out", data.to_str().unwrap(), "--quiet"]));

    let before = dir_bytes(&data, &["meta.json", "samples.jsonl"]);

    let train_cfg = tmp.path().join("train.json");
    write_train_config(&train_cfg, 11, &[]);
    let run_dir = tmp.path().join("run");
    assert_ok(&run(&["train", "--dataset", data.to_str().unwrap(), "--config", train_cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--quiet"]));
    assert!(run_dir.join("checkpoint.json").exists());
    assert!(run_dir.join("report.json").exists());
    assert!(run_dir.join("environments.json").exists());

    let eval_dir = tmp.path().join("eval");
    assert_ok(&run(&["evaluate", "--checkpoint", run_dir.join("checkpoint.json").to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--windows", "monthly", "--out", eval_dir.to_str().unwrap(), "--quiet"]));

    let csv = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "window,macro_f1,precision_mal,recall_mal,fcs_total,cosine_mean_mal");
    assert_eq!(lines.len(), 1 + 9, "nine monthly test windows expected");

    // no command mutates its input dataset
    let after = dir_bytes(&data, &["meta.json", "samples.jsonl"]);
    assert_eq!(before, after);
}

#[test]
fn invalid_stage_split_exits_2_naming_both_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    write_generator_spec(&spec, 1, 5);
    let data = tmp.path().join("data");
    assert_ok(&run(&["generate", "--config", spec.to_str().unwrap(), "--out", data.to_str().unwrap(), "--quiet"]));

    let train_cfg = tmp.path().join("train.json");
    write_train_config(&train_cfg, 1, &[("stage1_epochs", serde_json::json!(9))]);
    let out = run(&["train", "--dataset", data.to_str().unwrap(), "--config", train_cfg.to_str().unwrap(), "--out", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stage1_epochs") && stderr.contains("total_epochs"), "{stderr}");
}

#[test]
fn missing_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["generate", "--config", tmp.path().join("nope.json").to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dimension_mismatch_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let spec_a = tmp.path().join("a.json");
    write_generator_spec(&spec_a, 1, 5);
    let data_a = tmp.path().join("data_a");
    assert_ok(&run(&["generate", "--config", spec_a.to_str().unwrap(), "--out", data_a.to_str().unwrap(), "--quiet"]));

    // second dataset with a different dimension
    let spec_b = tmp.path().join("b.json");
    let mut spec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&spec_a).unwrap()).unwrap();
    spec["dim"] = serde_json::json!(64);
    std::fs::write(&spec_b, serde_json::to_vec(&spec).unwrap()).unwrap();
    let data_b = tmp.path().join("data_b");
    assert_ok(&run(&["generate", "--config", spec_b.to_str().unwrap(), "--out", data_b.to_str().unwrap(), "--quiet"]));

    let train_cfg = tmp.path().join("train.json");
    write_train_config(&train_cfg, 1, &[]);
    let run_dir = tmp.path().join("run");
    assert_ok(&run(&["train", "--dataset", data_a.to_str().unwrap(), "--config", train_cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--quiet"]));

    let out = run(&["evaluate", "--checkpoint", run_dir.join("checkpoint.json").to_str().unwrap(), "--dataset", data_b.to_str().unwrap(), "--out", tmp.path().join("eval").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dim"));
}

#[test]
fn numerical_failure_exits_4_with_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    write_generator_spec(&spec, 1, 5);
    let data = tmp.path().join("data");
    assert_ok(&run(&["generate", "--config", spec.to_str().unwrap(), "--out", data.to_str().unwrap(), "--quiet"]));

    let train_cfg = tmp.path().join("train.json");
    write_train_config(
        &train_cfg,
        1,
        &[
            ("learning_rate", serde_json::json!(1e12)),
            ("optimizer", serde_json::json!("plain-sgd")),
        ],
    );
    let out = run(&["train", "--dataset", data.to_str().unwrap(), "--config", train_cfg.to_str().unwrap(), "--out", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn continual_and_report_commands_run() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    write_generator_spec(&spec, 3, 9);
    let data = tmp.path().join("data");
    assert_ok(&run(&["generate", "--config", spec.to_str().unwrap(), "--out", data.to_str().unwrap(), "--quiet"]));

    let train_cfg = tmp.path().join("train.json");
    write_train_config(&train_cfg, 21, &[]);
    let run_dir = tmp.path().join("run");
    assert_ok(&run(&["train", "--dataset", data.to_str().unwrap(), "--config", train_cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--quiet"]));

    let loop_cfg = tmp.path().join("loop.json");
    let train_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&train_cfg).unwrap()).unwrap();
    let cfg = serde_json::json!({
        "trainer": "invariant",
        "train": train_json,
        "continual": {
            "f1_threshold": 1.0,
            "budget_per_update": 10,
            "retrain_mode": "stage2_only",
            "max_updates": 1
        }
    });
    std::fs::write(&loop_cfg, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();

    let loop_dir = tmp.path().join("loop");
    assert_ok(&run(&["continual", "--checkpoint", run_dir.join("checkpoint.json").to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--config", loop_cfg.to_str().unwrap(), "--out", loop_dir.to_str().unwrap(), "--quiet"]));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(loop_dir.join("continual_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["months"].as_array().unwrap().len(), 3);
    assert_eq!(report["update_count"], 1);

    let out = run(&["report", "--dir", loop_dir.to_str().unwrap()]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("continual"), "{stdout}");
}

#[test]
fn write_default_config_emits_valid_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("default.json");
    assert_ok(&run(&["generate", "--write-default-config", path.to_str().unwrap(), "--quiet"]));
    let raw = std::fs::read_to_string(&path).unwrap();
    let spec: serde_json::Value = serde_json::from_str(&raw).unwrap();
    assert_eq!(spec["dim"], 2000);
    assert_eq!(spec["n_train_months"], 12);
}

#[test]
fn ablation_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    write_generator_spec(&spec, 1, 13);
    let data = tmp.path().join("data");
    assert_ok(&run(&["generate", "--config", spec.to_str().unwrap(), "--out", data.to_str().unwrap(), "--quiet"]));

    let train_cfg = tmp.path().join("train.json");
    write_train_config(&train_cfg, 3, &[]);
    let full = tmp.path().join("full");
    let ablated = tmp.path().join("ablated");
    assert_ok(&run(&["train", "--dataset", data.to_str().unwrap(), "--config", train_cfg.to_str().unwrap(), "--out", full.to_str().unwrap(), "--ablation", "none", "--quiet"]));
    assert_ok(&run(&["train", "--dataset", data.to_str().unwrap(), "--config", train_cfg.to_str().unwrap(), "--out", ablated.to_str().unwrap(), "--ablation", "all", "--quiet"]));

    let report_full: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(full.join("report.json")).unwrap()).unwrap();
    let report_ablated: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ablated.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report_full["config"]["ablation"]["mpc1"], true);
    assert_eq!(report_ablated["config"]["ablation"]["mpc1"], false);
    assert_eq!(report_ablated["config"]["ablation"]["iga"], false);

    let bad = run(&["train", "--dataset", data.to_str().unwrap(), "--config", train_cfg.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap(), "--ablation", "bogus"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn analyze_writes_feature_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    write_generator_spec(&spec, 2, 31);
    let data = tmp.path().join("data");
    assert_ok(&run(&["generate", "--config", spec.to_str().unwrap(), "--out", data.to_str().unwrap(), "--quiet"]));

    let train_cfg = tmp.path().join("train.json");
    write_train_config(&train_cfg, 8, &[]);
    let run_dir = tmp.path().join("run");
    assert_ok(&run(&["train", "--dataset", data.to_str().unwrap(), "--config", train_cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--quiet"]));

    let out = tmp.path().join("analysis");
    assert_ok(&run(&[
        "analyze",
        "--checkpoint", run_dir.join("checkpoint.json").to_str().unwrap(),
        "--dataset", data.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
        "--subsets", "50",
        "--class-subsamples", "20",
        "--ig-samples", "16",
        "--ig-steps", "16",
        "--quiet",
    ]));

    let features = std::fs::read_to_string(out.join("features.csv")).unwrap();
    let lines: Vec<&str> = features.lines().collect();
    assert_eq!(lines[0], "index,role,gap,stable,discriminative,fcs");
    assert_eq!(lines.len(), 1 + 32, "one row per feature dimension");
    // planted roles surface in the role column
    assert!(lines[1].starts_with("0,stable,"));
    assert!(lines[3].starts_with("2,unstable,"));
    assert!(lines[6].starts_with("5,noise,"));

    assert!(out.join("similarity.csv").exists());
    let analysis: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("analysis.json")).unwrap())
            .unwrap();
    assert!(analysis["fcs_total"].as_f64().unwrap() >= 0.0);
    assert!(analysis["cosine_variance"].as_f64().is_some());
}
