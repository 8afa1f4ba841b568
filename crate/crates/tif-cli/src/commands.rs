//! Command implementations.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use tif_core::continual::{run_continual, ContinualConfig, TrainerKind};
use tif_core::data::{add_months, read_dataset, write_dataset, TemporalDataset};
use tif_core::datagen::{default_spec, generate as generate_dataset, GeneratorSpec};
use tif_core::envsplit::{split, Granularity};
use tif_core::metrics::{
    self, discriminability_check_all, stability_check_all, AttributionConfig,
    DiscriminabilityParams, FeatureRow, StabilityParams,
};
use tif_core::model::ModelState;
use tif_core::trainer::{train_erm, train_tif, validation_split, TrainConfig};

use crate::manifest::RunManifest;
use crate::{run_err, CliError, CliResult};

fn load_config_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))
}

fn parse_config<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> CliResult<T> {
    serde_json::from_slice(bytes)
        .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))
}

fn load_dataset(dir: &Path) -> CliResult<TemporalDataset> {
    read_dataset(dir).map_err(|e| CliError::data(e.to_string()))
}

fn load_checkpoint(path: &Path) -> CliResult<ModelState> {
    ModelState::load_checkpoint(path).map_err(|e| CliError::data(e.to_string()))
}

fn ensure_out_dir(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError { code: 1, msg: format!("cannot create {}: {e}", out.display()) })
}

fn check_dim(state: &ModelState, ds: &TemporalDataset) -> CliResult<()> {
    if state.dims().dim != ds.dim() {
        return Err(CliError::data(format!(
            "checkpoint expects dim {} but the dataset has dim {}",
            state.dims().dim,
            ds.dim()
        )));
    }
    Ok(())
}

/// Training portion of a mixed dataset: the first `train_months` calendar
/// months when configured, the whole dataset otherwise.
fn carve_training(ds: &TemporalDataset, cfg: &TrainConfig) -> CliResult<TemporalDataset> {
    match cfg.train_months {
        None => Ok(ds.clone()),
        Some(0) => Err(CliError::config("train_months must be at least 1")),
        Some(m) => {
            let first = ds.t_min().with_day(1);
            let cutoff = add_months(first, m)
                .pred_opt()
                .expect("valid date");
            let (train, _) = ds.split_at_date(cutoff);
            if train.is_empty() {
                return Err(CliError::data(format!(
                    "no samples in the first {m} months of the dataset"
                )));
            }
            Ok(train)
        }
    }
}

trait FirstOfMonth {
    fn with_day(&self, day: u32) -> chrono::NaiveDate;
}

impl FirstOfMonth for chrono::NaiveDate {
    fn with_day(&self, day: u32) -> chrono::NaiveDate {
        use chrono::Datelike;
        chrono::NaiveDate::from_ymd_opt(self.year(), self.month(), day).expect("valid day")
    }
}

pub fn generate(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    write_default_config: Option<PathBuf>,
    quiet: bool,
) -> CliResult<()> {
    if let Some(path) = write_default_config {
        let spec = default_spec(seed.unwrap_or(1));
        let mut bytes = serde_json::to_vec_pretty(&spec)
            .map_err(|e| CliError { code: 1, msg: e.to_string() })?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes)
            .map_err(|e| CliError { code: 1, msg: format!("cannot write {}: {e}", path.display()) })?;
        if !quiet {
            println!("wrote default generator spec to {}", path.display());
        }
        return Ok(());
    }

    let config = config.ok_or_else(|| CliError::config("--config is required"))?;
    let out = out.ok_or_else(|| CliError::config("--out is required"))?;
    let bytes = load_config_bytes(&config)?;
    let mut spec: GeneratorSpec = parse_config(&config, &bytes)?;
    let seed_from_flag = seed.is_some();
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| CliError::config(e.to_string()))?;

    let ds = generate_dataset(&spec).map_err(run_err)?;
    ensure_out_dir(&out)?;
    write_dataset(&ds, &out).map_err(run_err)?;

    let effective = serde_json::to_vec(&spec).map_err(|e| CliError { code: 1, msg: e.to_string() })?;
    let mut manifest = RunManifest::new("generate", spec.seed, seed_from_flag)
        .with_config_bytes(&effective)
        .with_dataset_dir(&out)
        .map_err(run_err)?;
    manifest.add_output("meta.json");
    manifest.add_output("samples.jsonl");
    manifest.write(&out).map_err(run_err)?;

    if !quiet {
        let malware = ds.samples().iter().filter(|s| s.label.is_malware()).count();
        println!(
            "generated {} samples ({} malware) over {}..{} into {}",
            ds.len(),
            malware,
            ds.t_min(),
            ds.t_max(),
            out.display()
        );
    }
    Ok(())
}

/// Parses `--ablation`: the set of loss terms to disable.
fn parse_ablation(spec: &str) -> CliResult<tif_core::AblationFlags> {
    let mut flags = tif_core::AblationFlags::default();
    match spec {
        "none" => {}
        "all" => flags = tif_core::AblationFlags::none(),
        list => {
            for part in list.split(',') {
                match part.trim() {
                    "mpc1" => flags.mpc1 = false,
                    "mpc2" => flags.mpc2 = false,
                    "iga" => flags.iga = false,
                    other => {
                        return Err(CliError::config(format!(
                            "unknown ablation term {other:?} (expected mpc1, mpc2, iga, none or all)"
                        )))
                    }
                }
            }
        }
    }
    Ok(flags)
}

pub fn train(
    dataset: &Path,
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    trainer: &str,
    ablation: Option<&str>,
    quiet: bool,
) -> CliResult<()> {
    let ds = load_dataset(dataset)?;
    let bytes = load_config_bytes(config)?;
    let mut cfg: TrainConfig = parse_config(config, &bytes)?;
    let seed_from_flag = seed.is_some();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(spec) = ablation {
        cfg.ablation = parse_ablation(spec)?;
    }
    let warnings = cfg.validate().map_err(|e| CliError::config(e.to_string()))?;

    let train_ds = carve_training(&ds, &cfg)?;
    let assignment = split(&train_ds, cfg.granularity).map_err(run_err)?;
    ensure_out_dir(out)?;
    assignment
        .write_json(&train_ds, &out.join("environments.json"))
        .map_err(run_err)?;

    let (state, report) = match trainer {
        "invariant" | "tif" => train_tif(&train_ds, &assignment, &cfg).map_err(run_err)?,
        "control" | "erm" => train_erm(&train_ds, &cfg).map_err(run_err)?,
        other => {
            return Err(CliError::config(format!(
                "unknown trainer {other:?} (expected invariant or control)"
            )))
        }
    };

    state
        .save_checkpoint(&out.join("checkpoint.json"))
        .map_err(run_err)?;
    report.write_json(&out.join("report.json")).map_err(run_err)?;

    let effective = serde_json::to_vec(&cfg).map_err(|e| CliError { code: 1, msg: e.to_string() })?;
    let mut manifest = RunManifest::new("train", cfg.seed, seed_from_flag)
        .with_config_bytes(&effective)
        .with_dataset_dir(dataset)
        .map_err(run_err)?;
    manifest.add_output("checkpoint.json");
    manifest.add_output("report.json");
    manifest.add_output("environments.json");
    manifest.write(out).map_err(run_err)?;

    if !quiet {
        for w in warnings.iter().chain(&report.warnings) {
            println!("note: {w}");
        }
        let last_val = report
            .stage2
            .last()
            .or(report.stage1.last())
            .and_then(|e| e.val_macro_f1);
        println!(
            "trained {} epochs ({} + {}) on {} samples in {:.1}s{}",
            report.stage1.len() + report.stage2.len(),
            report.stage1.len(),
            report.stage2.len(),
            train_ds.len(),
            report.wall_clock_secs,
            last_val
                .map(|v| format!(", final validation macro-F1 {v:.4}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

/// Validation-set mean malware embedding, reconstructed from the
/// checkpoint's recorded training period and granularity.
fn validation_reference(
    state: &ModelState,
    ds: &TemporalDataset,
) -> Option<ndarray::Array1<f64>> {
    let cutoff = state.meta.train_t_max?;
    let (train_part, _) = ds.split_at_date(cutoff);
    if train_part.is_empty() {
        return None;
    }
    let granularity = state.meta.granularity.unwrap_or(Granularity::Monthly);
    let assignment = split(&train_part, granularity).ok()?;
    let (_, val) = validation_split(&train_part, &assignment);
    metrics::mean_malware_embedding(state, train_part.samples(), &val)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    checkpoint: &Path,
    dataset: &Path,
    windows_spec: &str,
    out: &Path,
    ig_steps: usize,
    ig_runs: usize,
    ig_flip_prob: f64,
    quiet: bool,
) -> CliResult<()> {
    let state = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    check_dim(&state, &ds)?;
    let granularity: Granularity = windows_spec
        .parse()
        .map_err(|e: tif_core::Error| CliError::config(e.to_string()))?;

    let test_part = match state.meta.train_t_max {
        Some(cutoff) => ds.split_at_date(cutoff).1,
        None => ds.clone(),
    };
    if test_part.is_empty() {
        return Err(CliError::data(
            "no samples after the checkpoint's training period",
        ));
    }
    let reference = validation_reference(&state, &ds);
    let wins = metrics::windows(&test_part, granularity).map_err(run_err)?;
    let attribution = AttributionConfig {
        steps: ig_steps,
        noise_runs: ig_runs,
        flip_prob: ig_flip_prob,
        seed: state.seed(),
    };
    let rows =
        metrics::evaluate_over_windows(&state, &test_part, &wins, reference.as_ref(), &attribution)
            .map_err(run_err)?;

    ensure_out_dir(out)?;
    metrics::write_metrics_csv(&rows, &out.join("metrics.csv")).map_err(run_err)?;

    let f1_series: Vec<f64> = rows.iter().map(|r| r.macro_f1).collect();
    let aut = (f1_series.len() >= 2).then(|| metrics::aut(&f1_series).expect("two points"));
    let summary = serde_json::json!({
        "metric": "macro_f1",
        "windows": rows.len(),
        "aut": aut,
    });
    std::fs::write(
        out.join("aut_summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary).expect("serializable")),
    )
    .map_err(|e| CliError { code: 1, msg: e.to_string() })?;

    let mut manifest = RunManifest::new("evaluate", state.seed(), false)
        .with_dataset_dir(dataset)
        .map_err(run_err)?;
    manifest.add_output("metrics.csv");
    manifest.add_output("aut_summary.json");
    manifest.write(out).map_err(run_err)?;

    if !quiet {
        match aut {
            Some(v) => println!("evaluated {} windows, AUT(macro-F1) = {v:.4}", rows.len()),
            None => println!("evaluated {} window", rows.len()),
        }
    }
    Ok(())
}

pub struct AnalyzeArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub epsilon: f64,
    pub n0: Option<usize>,
    pub subsets: usize,
    pub delta: f64,
    pub class_subsamples: usize,
    pub ig_samples: usize,
    pub ig_steps: usize,
    pub ig_runs: usize,
    pub ig_flip_prob: f64,
    pub quiet: bool,
}

pub fn analyze(args: AnalyzeArgs) -> CliResult<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset(&args.dataset)?;
    check_dim(&state, &ds)?;

    let monthly = metrics::windows(&ds, Granularity::Monthly).map_err(run_err)?;
    let smallest_month = monthly.iter().map(|w| w.indices.len()).min().unwrap_or(1);
    let n0 = args.n0.unwrap_or_else(|| smallest_month.min(500)).max(1);

    let stability = stability_check_all(
        &ds,
        &StabilityParams {
            epsilon: args.epsilon,
            n0,
            subsets: args.subsets,
            seed: state.seed(),
        },
    )
    .map_err(run_err)?;
    let discriminability = discriminability_check_all(
        &ds,
        &DiscriminabilityParams {
            delta: args.delta,
            subsamples: args.class_subsamples,
            seed: state.seed(),
        },
    )
    .map_err(run_err)?;

    // contribution scores over the post-training period (whole dataset when
    // the checkpoint carries no period), with an optional cap on attributed
    // malware for tractability
    let scored_part = match state.meta.train_t_max {
        Some(cutoff) => {
            let (_, test) = ds.split_at_date(cutoff);
            if test.is_empty() {
                ds.clone()
            } else {
                test
            }
        }
        None => ds.clone(),
    };
    let window = fcs_window(&scored_part, args.ig_samples);
    let attribution = AttributionConfig {
        steps: args.ig_steps,
        noise_runs: args.ig_runs,
        flip_prob: args.ig_flip_prob,
        seed: state.seed(),
    };
    let fcs = metrics::fcs(&state, &scored_part, &window, &attribution).map_err(run_err)?;

    let roles = role_names(&ds);
    let rows: Vec<FeatureRow> = (0..ds.dim())
        .map(|j| FeatureRow {
            index: j as u32,
            role: roles[j].clone(),
            gap: discriminability[j].gap,
            stable: stability[j].stable,
            discriminative: discriminability[j].discriminative,
            fcs: fcs.per_feature[j],
        })
        .collect();

    ensure_out_dir(&args.out)?;
    metrics::write_features_csv(&rows, &args.out.join("features.csv")).map_err(run_err)?;

    // representation-similarity trajectory vs the validation set
    let reference = validation_reference(&state, &ds);
    let mut cosine_variance = None;
    if let Some(reference) = &reference {
        let test_windows = metrics::windows(&scored_part, Granularity::Monthly).map_err(run_err)?;
        let (series, variance) =
            metrics::representation_similarity(&state, &scored_part, &test_windows, reference);
        let mut csv = String::from("window,cosine_mean_mal\n");
        for (label, value) in series.window_labels.iter().zip(&series.values) {
            csv.push_str(&format!("{label},{value}\n"));
        }
        std::fs::write(args.out.join("similarity.csv"), csv)
            .map_err(|e| CliError { code: 1, msg: e.to_string() })?;
        cosine_variance = Some(variance);
    }

    let summary = serde_json::json!({
        "epsilon": args.epsilon,
        "n0": n0,
        "subsets": args.subsets,
        "delta": args.delta,
        "class_subsamples": args.class_subsamples,
        "fcs_total": fcs.total,
        "attributed_malware_cap": args.ig_samples,
        "cosine_variance": cosine_variance,
    });
    std::fs::write(
        args.out.join("analysis.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary).expect("serializable")),
    )
    .map_err(|e| CliError { code: 1, msg: e.to_string() })?;

    let mut manifest = RunManifest::new("analyze", state.seed(), false)
        .with_dataset_dir(&args.dataset)
        .map_err(run_err)?;
    manifest.add_output("features.csv");
    manifest.add_output("analysis.json");
    if cosine_variance.is_some() {
        manifest.add_output("similarity.csv");
    }
    manifest.write(&args.out).map_err(run_err)?;

    if !args.quiet {
        let stable_count = stability.iter().filter(|v| v.stable).count();
        println!(
            "analyzed {} features: {} stable, total contribution score {:.3}",
            ds.dim(),
            stable_count,
            fcs.total
        );
    }
    Ok(())
}

/// All benign indices plus malware capped (evenly spaced over time) for
/// attribution cost control. A cap of 0 keeps every malware sample.
fn fcs_window(ds: &TemporalDataset, cap: usize) -> Vec<usize> {
    let mut window: Vec<usize> = Vec::with_capacity(ds.len());
    let malware: Vec<usize> = ds
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label.is_malware())
        .map(|(i, _)| i)
        .collect();
    for (i, s) in ds.samples().iter().enumerate() {
        if !s.label.is_malware() {
            window.push(i);
        }
    }
    if cap == 0 || malware.len() <= cap {
        window.extend(&malware);
    } else {
        for k in 0..cap {
            window.push(malware[k * malware.len() / cap]);
        }
    }
    window.sort_unstable();
    window
}

fn role_names(ds: &TemporalDataset) -> Vec<String> {
    let mut roles = vec!["none".to_string(); ds.dim()];
    if let Some(r) = ds.feature_roles() {
        for (name, list) in [
            ("stable", &r.stable),
            ("unstable", &r.unstable),
            ("family", &r.family),
            ("noise", &r.noise),
        ] {
            for &idx in list {
                if (idx as usize) < roles.len() {
                    roles[idx as usize] = name.to_string();
                }
            }
        }
    }
    roles
}

#[derive(Deserialize)]
struct ContinualRunConfig {
    #[serde(default)]
    trainer: TrainerKind,
    train: TrainConfig,
    #[serde(default)]
    continual: ContinualConfig,
}

pub fn continual(
    checkpoint: &Path,
    dataset: &Path,
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    quiet: bool,
) -> CliResult<()> {
    let state = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    check_dim(&state, &ds)?;
    let bytes = load_config_bytes(config)?;
    let mut cfg: ContinualRunConfig = parse_config(config, &bytes)?;
    let seed_from_flag = seed.is_some();
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    cfg.continual
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;

    let cutoff = state.meta.train_t_max.ok_or_else(|| {
        CliError::data("checkpoint lacks a recorded training period; cannot split the stream")
    })?;
    let (train_part, stream) = ds.split_at_date(cutoff);
    if train_part.is_empty() || stream.is_empty() {
        return Err(CliError::data(format!(
            "dataset does not span both sides of the training cutoff {cutoff}"
        )));
    }

    let (final_state, report) = run_continual(
        &state,
        &train_part,
        &stream,
        cfg.trainer,
        &cfg.train,
        &cfg.continual,
    )
    .map_err(run_err)?;

    ensure_out_dir(out)?;
    report
        .write_json(&out.join("continual_report.json"))
        .map_err(run_err)?;
    final_state
        .save_checkpoint(&out.join("checkpoint_final.json"))
        .map_err(run_err)?;

    let mut manifest = RunManifest::new("continual", cfg.train.seed, seed_from_flag)
        .with_config_bytes(&bytes)
        .with_dataset_dir(dataset)
        .map_err(run_err)?;
    manifest.add_output("continual_report.json");
    manifest.add_output("checkpoint_final.json");
    manifest.write(out).map_err(run_err)?;

    if !quiet {
        println!(
            "continual loop over {} months: {} updates, {} labels spent{}",
            report.months.len(),
            report.update_count,
            report.total_label_cost,
            report
                .first_update_month
                .map(|m| format!(", first update at month {m}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

pub fn report(dir: &Path) -> CliResult<()> {
    let manifest_path = dir.join("manifest.json");
    let manifest_raw = std::fs::read_to_string(&manifest_path).map_err(|_| {
        CliError::config(format!(
            "{} does not look like an output directory (no manifest.json)",
            dir.display()
        ))
    })?;
    let manifest: serde_json::Value =
        serde_json::from_str(&manifest_raw).map_err(|e| CliError::data(e.to_string()))?;
    println!(
        "command: {}  seed: {}  version: {}",
        manifest["command"].as_str().unwrap_or("?"),
        manifest["seed"],
        manifest["version"].as_str().unwrap_or("?")
    );
    println!("outputs: {}", manifest["outputs"]);

    let report_path = dir.join("report.json");
    if let Ok(raw) = std::fs::read_to_string(&report_path) {
        if let Ok(r) = serde_json::from_str::<tif_core::TrainReport>(&raw) {
            println!(
                "training: {} stage-1 epochs, {} stage-2 epochs, {:.1}s",
                r.stage1.len(),
                r.stage2.len(),
                r.wall_clock_secs
            );
            if let Some(last) = r.stage2.last().or(r.stage1.last()) {
                println!(
                    "final losses: cls {:.4}, pal {:.4}, iga {:.6}{}",
                    last.cls,
                    last.pal,
                    last.iga,
                    last.val_macro_f1
                        .map(|v| format!(", val macro-F1 {v:.4}"))
                        .unwrap_or_default()
                );
            }
        }
    }

    let metrics_path = dir.join("metrics.csv");
    if let Ok(raw) = std::fs::read_to_string(&metrics_path) {
        let mut f1 = Vec::new();
        for line in raw.lines().skip(1) {
            if let Some(v) = line.split(',').nth(1).and_then(|v| v.parse::<f64>().ok()) {
                f1.push(v);
            }
        }
        if f1.len() >= 2 {
            println!(
                "metrics.csv: {} windows, macro-F1 {:.4} -> {:.4}, AUT {:.4}",
                f1.len(),
                f1.first().unwrap(),
                f1.last().unwrap(),
                metrics::aut(&f1).map_err(run_err)?
            );
        }
    }

    let continual_path = dir.join("continual_report.json");
    if let Ok(raw) = std::fs::read_to_string(&continual_path) {
        if let Ok(r) = serde_json::from_str::<tif_core::ContinualReport>(&raw) {
            println!(
                "continual: {} months, {} updates, {} labels{}",
                r.months.len(),
                r.update_count,
                r.total_label_cost,
                r.first_update_month
                    .map(|m| format!(", first update at month {m}"))
                    .unwrap_or_default()
            );
        }
    }

    let analysis_path = dir.join("analysis.json");
    if let Ok(raw) = std::fs::read_to_string(&analysis_path) {
        if let Ok(a) = serde_json::from_str::<serde_json::Value>(&raw) {
            println!(
                "analysis: total contribution score {}, cosine variance {}",
                a["fcs_total"], a["cosine_variance"]
            );
        }
    }
    Ok(())
}
