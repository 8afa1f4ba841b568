//! Drift-triggered continual updating.
//!
//! The model is evaluated on each incoming month; when macro-F1 falls below
//! the threshold, the budgeted number of lowest-confidence samples from that
//! month get their labels revealed, join the most recent training
//! environment, and the model is retrained (either the full two-stage run
//! from scratch or the cheaper stage-2 continuation). The recorded monthly
//! score is always the pre-update one.

use serde::{Deserialize, Serialize};

use crate::data::{Label, TemporalDataset};
use crate::envsplit::{split, EnvironmentAssignment};
use crate::error::{Error, Result};
use crate::metrics::{logits_for, macro_f1};
use crate::model::ModelState;
use crate::trainer::{continue_stage2, train_erm, train_tif, TrainConfig};

fn default_threshold() -> f64 {
    0.90
}
fn default_budget() -> usize {
    100
}
fn default_max_updates() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    #[default]
    FullTwoStage,
    Stage2Only,
}

/// Which trainer initializes and retrains the loop's model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    #[default]
    Invariant,
    Control,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinualConfig {
    /// Update trigger: macro-F1 below this value.
    #[serde(default = "default_threshold")]
    pub f1_threshold: f64,
    /// Labeled samples added per update.
    #[serde(default = "default_budget")]
    pub budget_per_update: usize,
    #[serde(default)]
    pub retrain_mode: RetrainMode,
    #[serde(default = "default_max_updates")]
    pub max_updates: usize,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        ContinualConfig {
            f1_threshold: default_threshold(),
            budget_per_update: default_budget(),
            retrain_mode: RetrainMode::default(),
            max_updates: default_max_updates(),
        }
    }
}

impl ContinualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f1_threshold.is_nan() || self.f1_threshold < 0.0 || self.f1_threshold > 1.0 {
            return Err(Error::spec(format!(
                "f1_threshold must lie in [0, 1], got {}",
                self.f1_threshold
            )));
        }
        if self.budget_per_update == 0 {
            return Err(Error::spec("budget_per_update must be positive"));
        }
        Ok(())
    }
}

/// One month of the continual timeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonthRecord {
    pub window: String,
    /// Macro-F1 of the model as it entered the month (pre-update).
    pub macro_f1: f64,
    pub update_triggered: bool,
    pub labels_spent: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinualReport {
    pub months: Vec<MonthRecord>,
    pub update_count: usize,
    pub total_label_cost: usize,
    /// 1-based index of the first month that triggered an update.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_update_month: Option<usize>,
    pub warnings: Vec<String>,
    pub config: ContinualConfig,
}

impl ContinualReport {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// Runs the update loop over a monthly stream that strictly follows the
/// training period. Returns the final model and the timeline report.
pub fn run_continual(
    initial: &ModelState,
    train_ds: &TemporalDataset,
    stream: &TemporalDataset,
    trainer: TrainerKind,
    train_cfg: &TrainConfig,
    cfg: &ContinualConfig,
) -> Result<(ModelState, ContinualReport)> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::spec("continual stream is empty"));
    }
    if stream.t_min() <= train_ds.t_max() {
        return Err(Error::schema(format!(
            "stream starts {} but training data extends to {}",
            stream.t_min(),
            train_ds.t_max()
        )));
    }
    if stream.dim() != train_ds.dim() {
        return Err(Error::schema(format!(
            "stream dim {} disagrees with training dim {}",
            stream.dim(),
            train_ds.dim()
        )));
    }

    let months = crate::metrics::windows(stream, crate::envsplit::Granularity::Monthly)?;
    let mut state = initial.clone();
    let mut current_train = train_ds.clone();
    let mut months_out = Vec::with_capacity(months.len());
    let mut warnings = Vec::new();
    let mut update_count = 0usize;
    let mut total_label_cost = 0usize;
    let mut first_update_month = None;

    for (mi, month) in months.iter().enumerate() {
        let samples = stream.samples();
        let truth: Vec<Label> = month.indices.iter().map(|&i| samples[i].label).collect();
        let logits = logits_for(&state, samples, &month.indices);
        let preds: Vec<Label> = logits
            .iter()
            .map(|&z| if z >= 0.0 { Label::Malware } else { Label::Benign })
            .collect();
        let f1 = macro_f1(&truth, &preds)?;

        let trigger = f1 < cfg.f1_threshold && update_count < cfg.max_updates;
        let mut labels_spent = 0;
        if trigger {
            // lowest-confidence selection: smallest |sigmoid(z) - 0.5|,
            // ties broken by sample id for determinism
            let mut ranked: Vec<(f64, usize)> = logits
                .iter()
                .zip(&month.indices)
                .map(|(&z, &i)| ((crate::losses::sigmoid(z) - 0.5).abs(), i))
                .collect();
            ranked.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap()
                    .then_with(|| samples[a.1].id.cmp(&samples[b.1].id))
            });
            let take = cfg.budget_per_update.min(ranked.len());
            if cfg.budget_per_update > ranked.len() {
                warnings.push(format!(
                    "month {} has only {} samples; budget {} truncated",
                    month.label,
                    ranked.len(),
                    cfg.budget_per_update
                ));
            }
            let selected: Vec<crate::data::Sample> = ranked[..take]
                .iter()
                .map(|&(_, i)| samples[i].clone())
                .collect();
            labels_spent = selected.len();
            total_label_cost += labels_spent;

            current_train = current_train.extend(selected)?;
            let assignment = last_environment_assignment(&current_train, train_cfg, train_ds)?;
            state = match (cfg.retrain_mode, trainer) {
                (RetrainMode::FullTwoStage, TrainerKind::Invariant) => {
                    train_tif(&current_train, &assignment, train_cfg)?.0
                }
                (RetrainMode::FullTwoStage, TrainerKind::Control) => {
                    train_erm(&current_train, train_cfg)?.0
                }
                (RetrainMode::Stage2Only, kind) => continue_stage2(
                    &state,
                    &current_train,
                    &assignment,
                    train_cfg,
                    kind == TrainerKind::Control,
                )?
                .0,
            };
            update_count += 1;
            if first_update_month.is_none() {
                first_update_month = Some(mi + 1);
            }
        }

        months_out.push(MonthRecord {
            window: month.label.clone(),
            macro_f1: f1,
            update_triggered: trigger,
            labels_spent,
        });
    }

    let report = ContinualReport {
        months: months_out,
        update_count,
        total_label_cost,
        first_update_month,
        warnings,
        config: cfg.clone(),
    };
    Ok((state, report))
}

/// Environment assignment for an augmented training set: the original
/// period's calendar split, with every appended (post-period) sample forced
/// into the latest environment.
fn last_environment_assignment(
    augmented: &TemporalDataset,
    train_cfg: &TrainConfig,
    original_train: &TemporalDataset,
) -> Result<EnvironmentAssignment> {
    let cutoff = original_train.t_max();
    let within = augmented.filter(|s| s.timestamp <= cutoff);
    let base = split(&within, train_cfg.granularity)?;
    base.extend_with_overflow(augmented, cutoff)
}
