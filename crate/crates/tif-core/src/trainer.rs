//! Two-stage invariant training and the plain control trainer.
//!
//! Stage 1 amplifies discriminative structure: every step draws one batch
//! per environment and minimizes the per-environment average of
//! classification loss plus the multi-proxy term computed within each
//! environment. Between stages the optimizer state is reset while model
//! parameters carry over. Stage 2 suppresses unstable structure: the
//! classification and multi-proxy terms move to the union batch and the
//! per-environment gradient-alignment penalty is added.
//!
//! The control trainer minimizes plain classification loss with the same
//! batch assembly, optimizer schedule and model selection, so the invariant
//! trainer with every extra term disabled reproduces it exactly — that
//! equivalence is a tested contract, not an accident.
//!
//! Batching: every step draws `batch_size_per_env` samples from every
//! environment (with replacement when an environment is smaller than the
//! batch, with a warning). Validation: within each environment and class,
//! every fifth sample is held out (a 80/20 temporally stratified split);
//! the selected checkpoint is the best validation macro-F1 within the final
//! quarter of each stage's epochs.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, TemporalDataset};
use crate::envsplit::{split, EnvironmentAssignment, Granularity};
use crate::error::{Error, Result};
use crate::losses::{
    bce_backward, grad_alignment_backward, inter_separation_backward, intra_diversity_backward,
    proxy_alignment_backward, EnvLogits, LossWeights,
};
use crate::metrics::{macro_f1, predict};
use crate::model::{unit_normalize_rows, InputBatch, ModelDims, ModelState};
use crate::optim::{Optimizer, OptimizerKind};
use crate::util::derive_seed;

fn default_true() -> bool {
    true
}

/// Which optional loss terms run; mirrors the ablation rows of the method's
/// component study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Multi-proxy term inside each environment (stage 1).
    #[serde(default = "default_true")]
    pub mpc1: bool,
    /// Multi-proxy term over the union batch (stage 2).
    #[serde(default = "default_true")]
    pub mpc2: bool,
    /// Gradient-alignment penalty (stage 2).
    #[serde(default = "default_true")]
    pub iga: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            mpc1: true,
            mpc2: true,
            iga: true,
        }
    }
}

impl AblationFlags {
    pub fn none() -> Self {
        AblationFlags {
            mpc1: false,
            mpc2: false,
            iga: false,
        }
    }
}

fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_granularity() -> Granularity {
    Granularity::Monthly
}
fn default_encoder_widths() -> Vec<usize> {
    vec![200, 200, 200]
}
fn default_head_hidden() -> Vec<usize> {
    vec![100]
}

/// Everything a training run needs besides the dataset. The seed is
/// mandatory: runs are reproducible by contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub weights: LossWeights,
    /// Stage-1 epoch count N; defaults to half the total.
    #[serde(default)]
    pub stage1_epochs: Option<usize>,
    pub total_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size_per_env: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    pub seed: u64,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default = "default_encoder_widths")]
    pub encoder_widths: Vec<usize>,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: Vec<usize>,
    /// How many leading calendar months of a mixed dataset form the training
    /// period (used by the command-line front end to carve the dataset).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_months: Option<u32>,
    /// When set, every per-environment batch carries this fraction of
    /// malware (stratified draws); otherwise batches follow the natural
    /// class mix. Applies identically to both trainers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_malware_fraction: Option<f64>,
    /// Stage-2 learning-rate multiplier: the suppression stage fine-tunes,
    /// so it often wants smaller steps. Applies identically to both
    /// trainers.
    #[serde(default = "default_stage2_lr_factor")]
    pub stage2_lr_factor: f64,
}

fn default_stage2_lr_factor() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            stage1_epochs: None,
            total_epochs: 16,
            batch_size_per_env: default_batch(),
            learning_rate: default_lr(),
            optimizer: OptimizerKind::default(),
            granularity: default_granularity(),
            seed,
            ablation: AblationFlags::default(),
            encoder_widths: default_encoder_widths(),
            head_hidden: default_head_hidden(),
            train_months: None,
            batch_malware_fraction: None,
            stage2_lr_factor: 1.0,
        }
    }

    /// Configuration used for the bundled synthetic benchmark: a stronger
    /// alignment penalty and a lighter multi-proxy weight than the bare
    /// defaults, which suit the benchmark's scale.
    pub fn benchmark(seed: u64) -> Self {
        TrainConfig {
            weights: LossWeights {
                alpha: 0.45,
                beta: 300.0,
                tau: 0.05,
                proxies_per_class: 2,
                ..LossWeights::default()
            },
            total_epochs: 20,
            stage1_epochs: Some(6),
            batch_size_per_env: 96,
            batch_malware_fraction: Some(0.125),
            ..TrainConfig::new(seed)
        }
    }

    pub fn stage1(&self) -> usize {
        self.stage1_epochs.unwrap_or(self.total_epochs / 2)
    }

    pub fn stage2(&self) -> usize {
        self.total_epochs - self.stage1()
    }

    pub fn model_dims(&self, dim: usize) -> ModelDims {
        ModelDims {
            dim,
            encoder_widths: self.encoder_widths.clone(),
            head_hidden: self.head_hidden.clone(),
            proxies_per_class: self.weights.proxies_per_class,
        }
    }

    pub fn validate(&self) -> Result<Vec<String>> {
        self.weights.validate()?;
        if let Some(n) = self.stage1_epochs {
            if n > self.total_epochs {
                return Err(Error::spec(format!(
                    "stage1_epochs ({n}) exceeds total_epochs ({})",
                    self.total_epochs
                )));
            }
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::spec(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size_per_env == 0 {
            return Err(Error::spec("batch_size_per_env must be positive"));
        }
        if (self.ablation.mpc1 || self.ablation.mpc2) && self.batch_size_per_env < 2 {
            return Err(Error::spec(
                "batch_size_per_env must be at least 2 while multi-proxy terms are enabled",
            ));
        }
        if let Some(q) = self.batch_malware_fraction {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::spec(format!(
                    "batch_malware_fraction must lie strictly between 0 and 1, got {q}"
                )));
            }
        }
        if self.stage2_lr_factor.is_nan() || self.stage2_lr_factor <= 0.0 {
            return Err(Error::spec(format!(
                "stage2_lr_factor must be positive, got {}",
                self.stage2_lr_factor
            )));
        }
        Ok(self.model_dims(1).warnings())
    }
}

/// Mean loss components of one epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLosses {
    pub cls: f64,
    pub pal: f64,
    pub intra: f64,
    pub inter: f64,
    pub iga: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_macro_f1: Option<f64>,
}

/// Loss curves plus bookkeeping emitted as `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub stage1: Vec<EpochLosses>,
    pub stage2: Vec<EpochLosses>,
    pub wall_clock_secs: f64,
    pub warnings: Vec<String>,
    pub param_fingerprint_stage1_end: u64,
    pub param_fingerprint_stage2_start: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_epoch_stage1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_epoch_stage2: Option<usize>,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// Runs the full two-stage invariant training over a pre-split training
/// dataset.
pub fn train_tif(
    ds: &TemporalDataset,
    assignment: &EnvironmentAssignment,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    run_training(ds, Some(assignment), cfg, Mode::Invariant(cfg.ablation), None, false)
}

/// The control arm: plain mini-batch training of the classification loss,
/// with the same batching, optimizer schedule and selection rules.
pub fn train_erm(ds: &TemporalDataset, cfg: &TrainConfig) -> Result<(ModelState, TrainReport)> {
    run_training(ds, None, cfg, Mode::Control, None, false)
}

/// Continues an existing model with stage-2 training only (used by the
/// continual update loop's cheaper retraining mode). The optimizer starts
/// fresh; `control` selects the plain objective instead of the invariant
/// one.
pub fn continue_stage2(
    initial: &ModelState,
    ds: &TemporalDataset,
    assignment: &EnvironmentAssignment,
    cfg: &TrainConfig,
    control: bool,
) -> Result<(ModelState, TrainReport)> {
    let mode = if control {
        Mode::Control
    } else {
        Mode::Invariant(cfg.ablation)
    };
    run_training(ds, Some(assignment), cfg, mode, Some(initial.clone()), true)
}

/// The 80/20 temporally stratified validation split: within every
/// environment and class, each fifth sample (by time order) is held out.
/// Returns (per-environment training indices, validation indices).
pub fn validation_split(
    ds: &TemporalDataset,
    assignment: &EnvironmentAssignment,
) -> (Vec<Vec<usize>>, Vec<usize>) {
    let samples = ds.samples();
    let mut env_train = vec![Vec::new(); assignment.env_count()];
    let mut val = Vec::new();
    for e in 0..assignment.env_count() {
        for class in [Label::Benign, Label::Malware] {
            let group: Vec<usize> = assignment
                .members(e)
                .iter()
                .copied()
                .filter(|&i| samples[i].label == class)
                .collect();
            for (pos, &i) in group.iter().enumerate() {
                if group.len() >= 5 && pos % 5 == 4 {
                    val.push(i);
                } else {
                    env_train[e].push(i);
                }
            }
        }
        env_train[e].sort_unstable();
    }
    val.sort_unstable();
    (env_train, val)
}

#[derive(Clone, Copy)]
enum Mode {
    Invariant(AblationFlags),
    Control,
}

impl Mode {
    fn mpc1(&self) -> bool {
        matches!(self, Mode::Invariant(f) if f.mpc1)
    }
    fn mpc2(&self) -> bool {
        matches!(self, Mode::Invariant(f) if f.mpc2)
    }
    fn iga(&self) -> bool {
        matches!(self, Mode::Invariant(f) if f.iga)
    }
}

/// Cyclic per-environment batch source. Each environment yields `batch`
/// indices per step from a reshuffled permutation stream (independent
/// uniform draws with replacement when the pool is smaller than requested).
/// With a malware quota, each environment keeps separate class streams and
/// every batch carries a fixed number of malware samples.
struct BatchSampler {
    rng: ChaCha8Rng,
    pools: Vec<Vec<ClassPool>>,
    takes: Vec<usize>,
}

struct ClassPool {
    members: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
}

impl ClassPool {
    fn new(members: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut order = members.clone();
        shuffle(&mut order, rng);
        ClassPool {
            members,
            order,
            cursor: 0,
        }
    }

    fn draw(&mut self, want: usize, out: &mut Vec<usize>, rng: &mut ChaCha8Rng) {
        let n = self.members.len();
        if n == 0 {
            return;
        }
        if n < want {
            for _ in 0..want {
                out.push(self.members[rng.random_range(0..n)]);
            }
            return;
        }
        let mut taken = 0;
        while taken < want {
            if self.cursor == n {
                shuffle(&mut self.order, rng);
                self.cursor = 0;
            }
            let take = (want - taken).min(n - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
            taken += take;
        }
    }
}

impl BatchSampler {
    fn new(
        ds: &TemporalDataset,
        envs: Vec<Vec<usize>>,
        batch: usize,
        malware_fraction: Option<f64>,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = ds.samples();
        let mut pools = Vec::with_capacity(envs.len());
        let mut takes = Vec::new();
        match malware_fraction {
            None => {
                takes.push(batch);
                for env in envs {
                    pools.push(vec![ClassPool::new(env, &mut rng)]);
                }
            }
            Some(q) => {
                let malware_take = ((batch as f64 * q).round() as usize).clamp(1, batch - 1);
                takes.push(batch - malware_take);
                takes.push(malware_take);
                for env in envs {
                    let (benign, malware): (Vec<usize>, Vec<usize>) = env
                        .into_iter()
                        .partition(|&i| !samples[i].label.is_malware());
                    pools.push(vec![
                        ClassPool::new(benign, &mut rng),
                        ClassPool::new(malware, &mut rng),
                    ]);
                }
            }
        }
        BatchSampler { rng, pools, takes }
    }

    fn next_step(&mut self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.pools.len());
        for env_pools in &mut self.pools {
            let mut batch = Vec::new();
            for (pool, &want) in env_pools.iter_mut().zip(&self.takes) {
                pool.draw(want, &mut batch, &mut self.rng);
            }
            out.push(batch);
        }
        out
    }
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

struct StepLosses {
    cls: f64,
    pal: f64,
    intra: f64,
    inter: f64,
    iga: f64,
}

fn run_training(
    ds: &TemporalDataset,
    assignment: Option<&EnvironmentAssignment>,
    cfg: &TrainConfig,
    mode: Mode,
    initial: Option<ModelState>,
    stage2_only: bool,
) -> Result<(ModelState, TrainReport)> {
    let start = Instant::now();
    let mut warnings = cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::spec("cannot train on an empty dataset"));
    }

    let owned_assignment;
    let assignment = match assignment {
        Some(a) => {
            if a.env_of_all().len() != ds.len() {
                return Err(Error::schema(format!(
                    "assignment covers {} samples but the dataset has {}",
                    a.env_of_all().len(),
                    ds.len()
                )));
            }
            a
        }
        None => {
            owned_assignment = split(ds, cfg.granularity)?;
            &owned_assignment
        }
    };

    let (env_train_raw, val_idx) = validation_split(ds, assignment);
    let env_train = merge_single_class_envs(ds, env_train_raw, &mut warnings);
    let n_envs = env_train.len();
    if env_train.iter().all(|e| e.is_empty()) {
        return Err(Error::spec("no training samples left after the validation split"));
    }
    let stage2_epochs = if stage2_only {
        cfg.total_epochs.saturating_sub(cfg.stage1())
    } else {
        cfg.stage2()
    };
    let stage1_epochs = if stage2_only { 0 } else { cfg.stage1() };
    if mode.iga() && stage2_epochs > 0 && n_envs < 2 {
        return Err(Error::spec(format!(
            "gradient alignment needs at least 2 environments, found {n_envs} after merging"
        )));
    }

    let smallest = env_train.iter().map(Vec::len).min().unwrap_or(0);
    if smallest < cfg.batch_size_per_env {
        warnings.push(format!(
            "smallest environment has {smallest} training samples; batches of {} are drawn \
             with replacement",
            cfg.batch_size_per_env
        ));
    }

    let dims = cfg.model_dims(ds.dim());
    let mut state = match initial {
        Some(s) => {
            if s.dims().dim != ds.dim() {
                return Err(Error::schema(format!(
                    "model expects dim {} but the dataset has {}",
                    s.dims().dim,
                    ds.dim()
                )));
            }
            s
        }
        None => ModelState::init(&dims, derive_seed(cfg.seed, "model-init", 0))?,
    };
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut sampler = BatchSampler::new(
        ds,
        env_train.clone(),
        cfg.batch_size_per_env,
        cfg.batch_malware_fraction,
        derive_seed(cfg.seed, "batch-sampler", 0),
    );
    let steps_per_epoch = env_train
        .iter()
        .map(|e| e.len().div_ceil(cfg.batch_size_per_env))
        .max()
        .unwrap_or(1)
        .max(1);

    let samples = ds.samples();
    let eval_val = |state: &ModelState| -> Option<f64> {
        if val_idx.is_empty() {
            return None;
        }
        let truth: Vec<Label> = val_idx.iter().map(|&i| samples[i].label).collect();
        let preds = predict(state, samples, &val_idx);
        macro_f1(&truth, &preds).ok()
    };

    let mut stage1_report = Vec::with_capacity(stage1_epochs);
    let mut selected_epoch_stage1 = None;

    // ---- stage 1 ----------------------------------------------------------
    {
        let window_start = stage1_epochs - stage1_epochs.div_ceil(4).min(stage1_epochs);
        let mut best: Option<(f64, usize, ModelState)> = None;
        for epoch in 0..stage1_epochs {
            let losses = run_epoch(
                &mut state,
                &mut optimizer,
                &mut sampler,
                ds,
                steps_per_epoch,
                cfg,
                mode,
                Stage::One,
            )
            .map_err(|e| at_epoch(e, epoch + 1))?;
            let val = eval_val(&state);
            stage1_report.push(EpochLosses {
                cls: losses.cls,
                pal: losses.pal,
                intra: losses.intra,
                inter: losses.inter,
                iga: losses.iga,
                val_macro_f1: val,
            });
            if epoch >= window_start {
                if let Some(f1) = val {
                    if best.as_ref().map(|(b, _, _)| f1 > *b).unwrap_or(true) {
                        best = Some((f1, epoch, state.clone()));
                    }
                }
            }
        }
        if let Some((_, epoch, best_state)) = best {
            state = best_state;
            selected_epoch_stage1 = Some(epoch + 1);
        }
    }

    let param_fingerprint_stage1_end = state.param_fingerprint();
    optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate * cfg.stage2_lr_factor);
    let param_fingerprint_stage2_start = state.param_fingerprint();

    // ---- stage 2 ----------------------------------------------------------
    let mut stage2_report = Vec::with_capacity(stage2_epochs);
    let mut selected_epoch_stage2 = None;
    {
        let window_start = stage2_epochs - stage2_epochs.div_ceil(4).min(stage2_epochs);
        let mut best: Option<(f64, usize, ModelState)> = None;
        for epoch in 0..stage2_epochs {
            let losses = run_epoch(
                &mut state,
                &mut optimizer,
                &mut sampler,
                ds,
                steps_per_epoch,
                cfg,
                mode,
                Stage::Two,
            )
            .map_err(|e| at_epoch(e, stage1_epochs + epoch + 1))?;
            let val = eval_val(&state);
            stage2_report.push(EpochLosses {
                cls: losses.cls,
                pal: losses.pal,
                intra: losses.intra,
                inter: losses.inter,
                iga: losses.iga,
                val_macro_f1: val,
            });
            if epoch >= window_start {
                if let Some(f1) = val {
                    if best.as_ref().map(|(b, _, _)| f1 > *b).unwrap_or(true) {
                        best = Some((f1, epoch, state.clone()));
                    }
                }
            }
        }
        if let Some((_, epoch, best_state)) = best {
            state = best_state;
            selected_epoch_stage2 = Some(stage1_epochs + epoch + 1);
        }
    }

    state.meta.train_t_max = Some(ds.t_max());
    state.meta.granularity = Some(assignment.granularity());

    let report = TrainReport {
        seed: cfg.seed,
        stage1: stage1_report,
        stage2: stage2_report,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        warnings,
        param_fingerprint_stage1_end,
        param_fingerprint_stage2_start,
        selected_epoch_stage1,
        selected_epoch_stage2,
        config: cfg.clone(),
    };
    Ok((state, report))
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numerical { msg, .. } => Error::Numerical { epoch, msg },
        other => other,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    One,
    Two,
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    state: &mut ModelState,
    optimizer: &mut Optimizer,
    sampler: &mut BatchSampler,
    ds: &TemporalDataset,
    steps: usize,
    cfg: &TrainConfig,
    mode: Mode,
    stage: Stage,
) -> Result<StepLosses> {
    let mut acc = StepLosses {
        cls: 0.0,
        pal: 0.0,
        intra: 0.0,
        inter: 0.0,
        iga: 0.0,
    };
    for _ in 0..steps {
        let batches = sampler.next_step();
        let losses = train_step(state, optimizer, ds, &batches, cfg, mode, stage)?;
        acc.cls += losses.cls;
        acc.pal += losses.pal;
        acc.intra += losses.intra;
        acc.inter += losses.inter;
        acc.iga += losses.iga;
    }
    let inv = 1.0 / steps as f64;
    acc.cls *= inv;
    acc.pal *= inv;
    acc.intra *= inv;
    acc.inter *= inv;
    acc.iga *= inv;
    let total = acc.cls + acc.pal + acc.intra + acc.inter + acc.iga;
    if !total.is_finite() {
        return Err(Error::Numerical {
            epoch: 0,
            msg: format!(
                "non-finite loss (cls {}, pal {}, intra {}, inter {}, iga {})",
                acc.cls, acc.pal, acc.intra, acc.inter, acc.iga
            ),
        });
    }
    Ok(acc)
}

fn train_step(
    state: &mut ModelState,
    optimizer: &mut Optimizer,
    ds: &TemporalDataset,
    batches: &[Vec<usize>],
    cfg: &TrainConfig,
    mode: Mode,
    stage: Stage,
) -> Result<StepLosses> {
    let samples = ds.samples();
    let n_envs = batches.len();
    let union: Vec<usize> = batches.iter().flatten().copied().collect();
    let labels: Vec<Label> = union.iter().map(|&i| samples[i].label).collect();
    let inputs = InputBatch::from_samples(samples, union.iter().copied());
    let cache = state.forward(&inputs);
    let logits = cache.logits();
    let h = state.dims().embedding_dim();
    let w = &cfg.weights;

    // classification over the union; with equal per-environment batches this
    // equals the per-environment average of stage 1's objective
    let (cls_value, mut d_logits) =
        bce_backward(logits.as_slice().expect("standard layout"), &labels, 1.0)?;

    let mut d_emb: Option<Array2<f64>> = None;
    let mut proxy_grads: Option<[Array2<f64>; 2]> = None;
    let mut pal_value = 0.0;
    let mut intra_value = 0.0;
    let mut inter_value = 0.0;
    let mut iga_value = 0.0;

    let mpc_active = match stage {
        Stage::One => mode.mpc1(),
        Stage::Two => mode.mpc2(),
    };

    if mpc_active {
        let mut d_emb_mat = Array2::zeros((union.len(), h));
        let mut d_prox = [
            Array2::zeros(state.proxies()[0].dim()),
            Array2::zeros(state.proxies()[1].dim()),
        ];

        // groups: one per environment in stage 1, the whole union in stage 2
        let groups: Vec<(usize, usize)> = match stage {
            Stage::One => {
                let mut offsets = Vec::with_capacity(n_envs);
                let mut start = 0;
                for b in batches {
                    offsets.push((start, start + b.len()));
                    start += b.len();
                }
                offsets
            }
            Stage::Two => vec![(0, union.len())],
        };
        let group_scale = w.alpha / groups.len() as f64;

        for &(lo, hi) in &groups {
            let mut rows_by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
            for r in lo..hi {
                rows_by_class[labels[r].as_u8() as usize].push(r);
            }
            let class_mats: Vec<Option<Array2<f64>>> = rows_by_class
                .iter()
                .map(|rows| {
                    (!rows.is_empty())
                        .then(|| cache.embeddings().select(ndarray::Axis(0), rows))
                })
                .collect();
            let views: Vec<Option<&Array2<f64>>> =
                class_mats.iter().map(|m| m.as_ref()).collect();
            let (value, d_embs, d_proxies) =
                proxy_alignment_backward(&views, state.proxies(), w.tau)?;
            pal_value += value / groups.len() as f64;
            for c in 0..2 {
                if let Some(d) = &d_embs[c] {
                    for (local, &row) in rows_by_class[c].iter().enumerate() {
                        let mut dst = d_emb_mat.row_mut(row);
                        dst.zip_mut_with(&d.row(local), |a, &b| *a += group_scale * b);
                    }
                }
                d_prox[c].zip_mut_with(&d_proxies[c], |a, &b| *a += group_scale * b);
            }
        }

        let (v_intra, g_intra) = intra_diversity_backward(state.proxies());
        let (v_inter, g_inter) = inter_separation_backward(state.proxies(), w.margin);
        intra_value = w.lambda_intra * v_intra;
        inter_value = w.lambda_inter * v_inter;
        for c in 0..2 {
            d_prox[c].zip_mut_with(&g_intra[c], |a, &b| *a += w.alpha * w.lambda_intra * b);
            d_prox[c].zip_mut_with(&g_inter[c], |a, &b| *a += w.alpha * w.lambda_inter * b);
        }
        d_emb = Some(d_emb_mat);
        proxy_grads = Some(d_prox);
    }

    if stage == Stage::Two && mode.iga() {
        let logit_slice = logits.as_slice().expect("standard layout");
        let mut env_views = Vec::with_capacity(n_envs);
        let mut start = 0;
        for b in batches {
            env_views.push(EnvLogits {
                logits: &logit_slice[start..start + b.len()],
                labels: &labels[start..start + b.len()],
            });
            start += b.len();
        }
        let (value, d_envs) = grad_alignment_backward(&env_views)?;
        iga_value = value;
        let mut start = 0;
        for (b, d_env) in batches.iter().zip(d_envs) {
            for (k, d) in d_env.iter().enumerate() {
                d_logits[start + k] += w.beta * d;
            }
            start += b.len();
        }
    }

    let mut grads = state.backward(&inputs, &cache, &d_logits, d_emb.as_ref());
    if let Some(pg) = &proxy_grads {
        for c in 0..2 {
            grads.proxies[c].zip_mut_with(&pg[c], |a, &b| *a += b);
        }
    }
    optimizer.step(state, &grads);
    if mpc_active {
        for p in state.proxies_mut() {
            unit_normalize_rows(p);
        }
    }

    Ok(StepLosses {
        cls: cls_value,
        pal: pal_value,
        intra: intra_value,
        inter: inter_value,
        iga: iga_value,
    })
}

/// Environments whose training part carries a single class are merged into
/// their nearest (earlier, else next) neighbor; the per-environment
/// classification average is ill-posed on one class.
fn merge_single_class_envs(
    ds: &TemporalDataset,
    mut envs: Vec<Vec<usize>>,
    warnings: &mut Vec<String>,
) -> Vec<Vec<usize>> {
    let samples = ds.samples();
    loop {
        if envs.len() <= 1 {
            return envs;
        }
        let single = envs.iter().position(|members| {
            let mut has = [false, false];
            for &i in members {
                has[samples[i].label.as_u8() as usize] = true;
            }
            !(has[0] && has[1])
        });
        let Some(e) = single else { return envs };
        warnings.push(format!(
            "environment {e} has a single class in its training part; merged into environment {}",
            if e > 0 { e - 1 } else { e + 1 }
        ));
        let moved = envs.remove(e);
        let target = e.saturating_sub(1);
        envs[target].extend(moved);
        envs[target].sort_unstable();
    }
}
