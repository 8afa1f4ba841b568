//! Evaluation metrics and feature-stability diagnostics.
//!
//! Window-level quality: [`macro_f1`] and the trapezoidal time-average
//! [`aut`]. Feature-level diagnostics: [`active_ratio`], the Monte-Carlo
//! stability check ([`stability_check`]), the class-gap discriminability
//! check ([`discriminability_check`]), straight-path integrated gradients
//! ([`integrated_gradients`]) and the per-feature contribution score
//! ([`fcs`]) — class gap times mean positive attribution. Representation
//! drift is tracked as the cosine between each window's mean malware
//! embedding and the validation set's ([`representation_similarity`]).
//!
//! Everything here is read-only and deterministic; randomized checks derive
//! their RNG streams from an explicit seed, so results do not depend on
//! evaluation order or worker count.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::data::{Label, Sample, TemporalDataset};
use crate::envsplit::{split, Granularity};
use crate::error::{Error, Result};
use crate::model::{InputBatch, ModelState};
use crate::util::{derive_seed, map_indexed};

// ---------------------------------------------------------------------------
// classification metrics
// ---------------------------------------------------------------------------

/// Unweighted mean of per-class F1. A class with no true and no predicted
/// samples counts as F1 = 1 (nothing to get wrong); any other zero
/// denominator contributes 0, the usual 0/0 -> 0 convention.
pub fn macro_f1(y_true: &[Label], y_pred: &[Label]) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::spec(format!(
            "macro_f1 needs equal, non-empty label vectors (got {}/{})",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut sum = 0.0;
    for class in [Label::Benign, Label::Malware] {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&t, &p) in y_true.iter().zip(y_pred) {
            match (t == class, p == class) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        let f1 = if tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        sum += f1;
    }
    Ok(sum / 2.0)
}

/// Precision and recall of the malware class (0/0 -> 0).
pub fn precision_recall_malware(y_true: &[Label], y_pred: &[Label]) -> (f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t.is_malware(), p.is_malware()) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    (precision, recall)
}

/// A metric traced over time windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub window_labels: Vec<String>,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(window_labels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if window_labels.len() != values.len() {
            return Err(Error::spec("series labels and values must align"));
        }
        Ok(MetricSeries {
            window_labels,
            values,
        })
    }

    pub fn aut(&self) -> Result<f64> {
        aut(&self.values)
    }

    /// Population variance of the values.
    pub fn variance(&self) -> f64 {
        variance(&self.values)
    }
}

pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
}

/// Area Under Time: the trapezoidal average of a metric over its windows,
/// `1/(N-1) * sum (m_{t+1} + m_t)/2`.
pub fn aut(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::spec(format!(
            "aut needs at least 2 points, got {}",
            values.len()
        )));
    }
    let n = values.len();
    let sum: f64 = values.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
    Ok(sum / (n - 1) as f64)
}

/// Labels predicted by thresholding the logit at 0 (probability 0.5).
pub fn predict(state: &ModelState, samples: &[Sample], idxs: &[usize]) -> Vec<Label> {
    logits_for(state, samples, idxs)
        .into_iter()
        .map(|z| if z >= 0.0 { Label::Malware } else { Label::Benign })
        .collect()
}

/// Raw logits, evaluated in deterministic chunks.
pub fn logits_for(state: &ModelState, samples: &[Sample], idxs: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idxs.len());
    for chunk in idxs.chunks(512) {
        let batch = InputBatch::from_samples(samples, chunk.iter().copied());
        out.extend(state.logits_batch(&batch));
    }
    out
}

// ---------------------------------------------------------------------------
// windows
// ---------------------------------------------------------------------------

/// A labelled group of sample positions.
#[derive(Debug, Clone)]
pub struct Window {
    pub label: String,
    pub indices: Vec<usize>,
}

/// Groups a dataset's samples into temporal windows (monthly, quarterly or
/// equal-count), reusing the environment splitter.
pub fn windows(ds: &TemporalDataset, granularity: Granularity) -> Result<Vec<Window>> {
    let assignment = split(ds, granularity)?;
    Ok((0..assignment.env_count())
        .map(|e| Window {
            label: assignment.label(e).to_string(),
            indices: assignment.members(e).to_vec(),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// active ratio, stability, discriminability
// ---------------------------------------------------------------------------

/// Fraction of the subset's samples in which the feature is present.
pub fn active_ratio<'a>(samples: impl IntoIterator<Item = &'a Sample>, feature: u32) -> f64 {
    let mut hits = 0usize;
    let mut n = 0usize;
    for s in samples {
        n += 1;
        if s.features.binary_search(&feature).is_ok() {
            hits += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Bit-set over sample positions; intersection counts drive the batched
/// ratio computations.
struct Bitmap {
    words: Vec<u64>,
    count: usize,
}

impl Bitmap {
    fn from_indices(n: usize, idxs: &[usize]) -> Self {
        let mut words = vec![0u64; n.div_ceil(64)];
        for &i in idxs {
            words[i / 64] |= 1 << (i % 64);
        }
        Bitmap {
            words,
            count: idxs.len(),
        }
    }

    fn and_count(&self, other: &Bitmap) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }
}

/// Per-feature lists of the sample positions where the feature is active.
fn inverted_index(ds: &TemporalDataset) -> Vec<Vec<usize>> {
    let mut inv = vec![Vec::new(); ds.dim()];
    for (i, s) in ds.samples().iter().enumerate() {
        for &f in &s.features {
            inv[f as usize].push(i);
        }
    }
    inv
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StabilityParams {
    /// Maximum allowed deviation of any subset ratio from the global ratio.
    pub epsilon: f64,
    /// Minimum subset size quantified over.
    pub n0: usize,
    /// Number of Monte-Carlo subsets.
    pub subsets: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub stable: bool,
    pub max_deviation: f64,
}

/// Monte-Carlo surrogate for the all-subsets stability definition: the
/// feature's active ratio is measured over `subsets` random subsets of size
/// at least `n0` and over every monthly window with at least `n0` samples;
/// the feature is stable iff no measurement deviates from the global ratio
/// by more than `epsilon`.
pub fn stability_check(
    ds: &TemporalDataset,
    feature: u32,
    params: &StabilityParams,
) -> Result<StabilityVerdict> {
    let ctx = StabilityContext::new(ds, params)?;
    let inv = if (feature as usize) < ds.dim() {
        ds.samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.features.binary_search(&feature).is_ok())
            .map(|(i, _)| i)
            .collect::<Vec<_>>()
    } else {
        return Err(Error::spec(format!(
            "feature {feature} out of range for dim {}",
            ds.dim()
        )));
    };
    Ok(ctx.verdict(&inv))
}

/// Stability verdicts for every feature at once (shared subsets, shared
/// windows); orders of magnitude faster than per-feature calls.
pub fn stability_check_all(
    ds: &TemporalDataset,
    params: &StabilityParams,
) -> Result<Vec<StabilityVerdict>> {
    let ctx = StabilityContext::new(ds, params)?;
    let inv = inverted_index(ds);
    Ok(map_indexed(ds.dim(), |f| ctx.verdict(&inv[f])))
}

struct StabilityContext {
    n: usize,
    epsilon: f64,
    groups: Vec<Bitmap>,
}

impl StabilityContext {
    fn new(ds: &TemporalDataset, params: &StabilityParams) -> Result<Self> {
        let n = ds.len();
        if params.n0 == 0 || params.n0 > n {
            return Err(Error::spec(format!(
                "stability n0 must be in [1, {n}], got {}",
                params.n0
            )));
        }
        if params.subsets == 0 {
            return Err(Error::spec("stability check needs at least one subset"));
        }
        let mut groups = Vec::with_capacity(params.subsets + 26);
        let mut scratch: Vec<usize> = (0..n).collect();
        for i in 0..params.subsets {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "stability-subset", i as u64));
            let size = rng.random_range(params.n0..=n);
            // partial Fisher-Yates: the first `size` entries become the subset
            for j in 0..size {
                let k = rng.random_range(j..n);
                scratch.swap(j, k);
            }
            groups.push(Bitmap::from_indices(n, &scratch[..size]));
        }
        // sliding monthly windows large enough to satisfy the quantifier
        for w in windows(ds, Granularity::Monthly)? {
            if w.indices.len() >= params.n0 {
                groups.push(Bitmap::from_indices(n, &w.indices));
            }
        }
        Ok(StabilityContext {
            n,
            epsilon: params.epsilon,
            groups,
        })
    }

    fn verdict(&self, active_positions: &[usize]) -> StabilityVerdict {
        let presence = Bitmap::from_indices(self.n, active_positions);
        let global = presence.count as f64 / self.n as f64;
        let mut max_dev: f64 = 0.0;
        for g in &self.groups {
            let r = presence.and_count(g) as f64 / g.count as f64;
            max_dev = max_dev.max((r - global).abs());
        }
        StabilityVerdict {
            stable: max_dev <= self.epsilon,
            max_deviation: max_dev,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiscriminabilityParams {
    /// Minimum class gap to call a feature discriminative.
    pub delta: f64,
    /// Number of 50% class subsamples probing size-independence.
    pub subsamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminabilityVerdict {
    pub discriminative: bool,
    /// Full-class active-ratio gap.
    pub gap: f64,
    /// Smallest gap observed over the random class subsamples.
    pub min_subsampled_gap: f64,
}

/// Class-gap check: `gap = |r(f, malware) - r(f, benign)|`, verdict
/// `gap >= delta`; additionally reports the minimum gap over random 50%
/// subsamples of each class (robustness of the gap to class sizes).
pub fn discriminability_check(
    ds: &TemporalDataset,
    feature: u32,
    params: &DiscriminabilityParams,
) -> Result<DiscriminabilityVerdict> {
    let ctx = DiscriminabilityContext::new(ds, params)?;
    let positions: Vec<usize> = ds
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.features.binary_search(&feature).is_ok())
        .map(|(i, _)| i)
        .collect();
    Ok(ctx.verdict(&positions))
}

pub fn discriminability_check_all(
    ds: &TemporalDataset,
    params: &DiscriminabilityParams,
) -> Result<Vec<DiscriminabilityVerdict>> {
    let ctx = DiscriminabilityContext::new(ds, params)?;
    let inv = inverted_index(ds);
    Ok(map_indexed(ds.dim(), |f| ctx.verdict(&inv[f])))
}

struct DiscriminabilityContext {
    n: usize,
    delta: f64,
    full: [Bitmap; 2],
    /// Pairs of 50% subsamples (benign, malware).
    subsample_pairs: Vec<[Bitmap; 2]>,
}

impl DiscriminabilityContext {
    fn new(ds: &TemporalDataset, params: &DiscriminabilityParams) -> Result<Self> {
        let n = ds.len();
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, s) in ds.samples().iter().enumerate() {
            by_class[s.label.as_u8() as usize].push(i);
        }
        if by_class[0].is_empty() || by_class[1].is_empty() {
            return Err(Error::spec(
                "discriminability needs samples from both classes",
            ));
        }
        let full = [
            Bitmap::from_indices(n, &by_class[0]),
            Bitmap::from_indices(n, &by_class[1]),
        ];
        let mut subsample_pairs = Vec::with_capacity(params.subsamples);
        for i in 0..params.subsamples {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                params.seed,
                "discriminability-subsample",
                i as u64,
            ));
            let mut pick = |class: &Vec<usize>| -> Bitmap {
                let size = (class.len() / 2).max(1);
                let mut scratch = class.clone();
                for j in 0..size {
                    let k = rng.random_range(j..scratch.len());
                    scratch.swap(j, k);
                }
                Bitmap::from_indices(n, &scratch[..size])
            };
            subsample_pairs.push([pick(&by_class[0]), pick(&by_class[1])]);
        }
        Ok(DiscriminabilityContext {
            n,
            delta: params.delta,
            full,
            subsample_pairs,
        })
    }

    fn verdict(&self, active_positions: &[usize]) -> DiscriminabilityVerdict {
        let presence = Bitmap::from_indices(self.n, active_positions);
        let ratio = |b: &Bitmap| presence.and_count(b) as f64 / b.count.max(1) as f64;
        let gap = (ratio(&self.full[1]) - ratio(&self.full[0])).abs();
        let mut min_gap = gap;
        for pair in &self.subsample_pairs {
            let g = (ratio(&pair[1]) - ratio(&pair[0])).abs();
            min_gap = min_gap.min(g);
        }
        DiscriminabilityVerdict {
            discriminative: gap >= self.delta,
            gap,
            min_subsampled_gap: min_gap,
        }
    }
}

// ---------------------------------------------------------------------------
// integrated gradients and feature contribution
// ---------------------------------------------------------------------------

/// Anything whose malicious-class logit can be differentiated along the
/// straight path from the all-zeros baseline to a binary input.
pub trait AttributionTarget {
    /// `d logit / d x_j` for `j` in `support`, at each `alpha * x`;
    /// shape `(alphas.len(), support.len())`.
    fn path_gradients(&self, support: &[u32], alphas: &[f64]) -> Array2<f64>;

    /// Logit at `scale * x` for the binary input with the given support.
    fn logit_at(&self, support: &[u32], scale: f64) -> f64;
}

impl AttributionTarget for ModelState {
    fn path_gradients(&self, support: &[u32], alphas: &[f64]) -> Array2<f64> {
        let cache = self.forward_scaled_support(support, alphas);
        self.logit_input_gradients(support, &cache)
    }

    fn logit_at(&self, support: &[u32], scale: f64) -> f64 {
        self.forward_scaled_support(support, &[scale]).logits()[0]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Riemann midpoint steps along the path.
    pub steps: usize,
    /// Independent noisy repetitions averaged together.
    pub noise_runs: usize,
    /// Per-bit flip probability for the noisy repetitions.
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            steps: 64,
            noise_runs: 5,
            flip_prob: 0.01,
            seed: 0,
        }
    }
}

impl AttributionConfig {
    /// Noise-free single run (exact completeness checks).
    pub fn plain(steps: usize) -> Self {
        AttributionConfig {
            steps,
            noise_runs: 1,
            flip_prob: 0.0,
            seed: 0,
        }
    }
}

/// Midpoint-rule integrated gradients toward the malicious logit, from the
/// all-zeros baseline, averaged over `noise_runs` randomly bit-flipped
/// copies of the input. Returns a dense attribution vector of length `dim`.
/// `tag` individualizes the noise stream (callers pass a stable per-sample
/// tag so parallel evaluation stays deterministic).
pub fn integrated_gradients<T: AttributionTarget>(
    target: &T,
    features: &[u32],
    dim: usize,
    cfg: &AttributionConfig,
    tag: u64,
) -> Vec<f64> {
    assert!(cfg.steps >= 1, "need at least one integration step");
    let mut attribution = vec![0.0f64; dim];
    // Midpoint rule over a power-graded partition of [0, 1]: the normalized
    // embedding varies fastest near the baseline, so bins are cubically
    // finer there. Exact for models with constant input gradients.
    let edges: Vec<f64> = (0..=cfg.steps)
        .map(|i| (i as f64 / cfg.steps as f64).powi(3))
        .collect();
    let alphas: Vec<f64> = edges.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    let bin_widths: Vec<f64> = edges.windows(2).map(|w| w[1] - w[0]).collect();

    for run in 0..cfg.noise_runs.max(1) {
        let support: Vec<u32> = if cfg.flip_prob > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                "ig-noise",
                tag.wrapping_mul(1_000_003).wrapping_add(run as u64),
            ));
            let mut s = Vec::with_capacity(features.len() + 8);
            let mut active = features.iter().peekable();
            for j in 0..dim as u32 {
                let is_active = matches!(active.peek(), Some(&&a) if a == j);
                if is_active {
                    active.next();
                }
                let flip = rng.random::<f64>() < cfg.flip_prob;
                if is_active != flip {
                    s.push(j);
                }
            }
            s
        } else {
            features.to_vec()
        };
        if support.is_empty() {
            continue;
        }
        let grads = target.path_gradients(&support, &alphas);
        for (sj, &j) in support.iter().enumerate() {
            let mut path_integral = 0.0;
            for (t, &w) in bin_widths.iter().enumerate() {
                path_integral += w * grads[(t, sj)];
            }
            // x_j - baseline_j = 1 for every supported coordinate
            attribution[j as usize] += path_integral;
        }
    }
    let inv_runs = 1.0 / cfg.noise_runs.max(1) as f64;
    for a in &mut attribution {
        *a *= inv_runs;
    }
    attribution
}

/// Per-feature contribution scores over one window of samples:
/// `fcs[j] = |r(f_j, malware) - r(f_j, benign)| * is[j]` where `is[j]` is the
/// mean positive attribution over the window's malware samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FcsResult {
    pub per_feature: Vec<f64>,
    pub gaps: Vec<f64>,
    pub importance: Vec<f64>,
    pub total: f64,
}

pub fn fcs(
    state: &ModelState,
    ds: &TemporalDataset,
    window: &[usize],
    cfg: &AttributionConfig,
) -> Result<FcsResult> {
    let dim = ds.dim();
    let samples = ds.samples();
    let mut benign = Vec::new();
    let mut malware = Vec::new();
    for &i in window {
        match samples[i].label {
            Label::Benign => benign.push(i),
            Label::Malware => malware.push(i),
        }
    }

    let mut gaps = vec![0.0f64; dim];
    {
        let count = |idxs: &[usize], sign: f64, gaps: &mut [f64]| {
            if idxs.is_empty() {
                return;
            }
            let inv = sign / idxs.len() as f64;
            for &i in idxs {
                for &f in &samples[i].features {
                    gaps[f as usize] += inv;
                }
            }
        };
        count(&malware, 1.0, &mut gaps);
        count(&benign, -1.0, &mut gaps);
        for g in &mut gaps {
            *g = g.abs();
        }
    }

    // mean positive attribution over the window's malware samples
    let per_sample: Vec<Vec<f64>> = map_indexed(malware.len(), |k| {
        let i = malware[k];
        let tag = crate::util::fnv64(samples[i].id.as_bytes());
        integrated_gradients(state, &samples[i].features, dim, cfg, tag)
    });
    let mut importance = vec![0.0f64; dim];
    if !malware.is_empty() {
        let inv = 1.0 / malware.len() as f64;
        for ig in &per_sample {
            for (acc, &v) in importance.iter_mut().zip(ig) {
                if v > 0.0 {
                    *acc += v * inv;
                }
            }
        }
    }

    let per_feature: Vec<f64> = gaps
        .iter()
        .zip(&importance)
        .map(|(&g, &is)| g * is)
        .collect();
    let total = per_feature.iter().sum();
    Ok(FcsResult {
        per_feature,
        gaps,
        importance,
        total,
    })
}

// ---------------------------------------------------------------------------
// representation similarity
// ---------------------------------------------------------------------------

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Mean embedding of the malware samples among `idxs`; `None` if there are
/// none.
pub fn mean_malware_embedding(
    state: &ModelState,
    samples: &[Sample],
    idxs: &[usize],
) -> Option<Array1<f64>> {
    let malware: Vec<usize> = idxs
        .iter()
        .copied()
        .filter(|&i| samples[i].label.is_malware())
        .collect();
    if malware.is_empty() {
        return None;
    }
    let h = state.dims().embedding_dim();
    let mut acc = Array1::zeros(h);
    for chunk in malware.chunks(512) {
        let batch = InputBatch::from_samples(samples, chunk.iter().copied());
        let cache = state.forward(&batch);
        for row in cache.embeddings().rows() {
            acc += &row;
        }
    }
    Some(acc / malware.len() as f64)
}

/// Cosine between each window's mean malware embedding and a reference mean
/// (typically the validation set's), plus the variance of that series.
/// Windows without malware contribute cosine 0.
pub fn representation_similarity(
    state: &ModelState,
    ds: &TemporalDataset,
    wins: &[Window],
    reference: &Array1<f64>,
) -> (MetricSeries, f64) {
    let values: Vec<f64> = map_indexed(wins.len(), |w| {
        match mean_malware_embedding(state, ds.samples(), &wins[w].indices) {
            Some(mean) => cosine(&mean, reference),
            None => 0.0,
        }
    });
    let labels = wins.iter().map(|w| w.label.clone()).collect();
    let series = MetricSeries::new(labels, values).expect("aligned by construction");
    let var = series.variance();
    (series, var)
}

// ---------------------------------------------------------------------------
// CSV outputs
// ---------------------------------------------------------------------------

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct WindowMetricsRow {
    pub window: String,
    pub macro_f1: f64,
    pub precision_mal: f64,
    pub recall_mal: f64,
    pub fcs_total: f64,
    pub cosine_mean_mal: f64,
}

pub fn write_metrics_csv(rows: &[WindowMetricsRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("window,macro_f1,precision_mal,recall_mal,fcs_total,cosine_mean_mal\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.window, r.macro_f1, r.precision_mal, r.recall_mal, r.fcs_total, r.cosine_mean_mal
        ));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// One row of `features.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct FeatureRow {
    pub index: u32,
    pub role: String,
    pub gap: f64,
    pub stable: bool,
    pub discriminative: bool,
    pub fcs: f64,
}

pub fn write_features_csv(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("index,role,gap,stable,discriminative,fcs\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.index, r.role, r.gap, r.stable, r.discriminative, r.fcs
        ));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Evaluates the full `metrics.csv` row set over the given windows.
/// `reference_emb` is the validation-set mean malware embedding used for the
/// cosine column (0 when absent).
pub fn evaluate_over_windows(
    state: &ModelState,
    ds: &TemporalDataset,
    wins: &[Window],
    reference_emb: Option<&Array1<f64>>,
    attribution: &AttributionConfig,
) -> Result<Vec<WindowMetricsRow>> {
    let samples = ds.samples();
    let mut rows = Vec::with_capacity(wins.len());
    for w in wins {
        let truth: Vec<Label> = w.indices.iter().map(|&i| samples[i].label).collect();
        let preds = predict(state, samples, &w.indices);
        let f1 = macro_f1(&truth, &preds)?;
        let (precision, recall) = precision_recall_malware(&truth, &preds);
        let fcs_total = fcs(state, ds, &w.indices, attribution)?.total;
        let cos = match reference_emb {
            Some(reference) => mean_malware_embedding(state, samples, &w.indices)
                .map(|m| cosine(&m, reference))
                .unwrap_or(0.0),
            None => 0.0,
        };
        rows.push(WindowMetricsRow {
            window: w.label.clone(),
            macro_f1: f1,
            precision_mal: precision,
            recall_mal: recall,
            fcs_total,
            cosine_mean_mal: cos,
        });
    }
    Ok(rows)
}
