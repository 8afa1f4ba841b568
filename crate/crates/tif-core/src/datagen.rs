//! Synthetic drifting-dataset generator.
//!
//! Plants four kinds of features in a sparse binary space:
//!
//! * **stable** — class-conditional activation probabilities constant over
//!   time, with a fixed benign/malware gap;
//! * **unstable** — the malware-side probability interpolates linearly from
//!   an initial to a final value over the six months starting at
//!   `drift_month`, then stays constant;
//! * **family** — active (with some probability) only in malware of one
//!   family; family prevalence follows a per-month schedule, so families can
//!   fade, rise, or first appear after the training period;
//! * **noise** — label-independent activation.
//!
//! Generation is deterministic given the seed: every month draws from its own
//! derived RNG stream, and samples are emitted in a fixed order.

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{add_months, days_in_month, FeatureRoles, Label, Sample, TemporalDataset};
use crate::error::{Error, Result};
use crate::util::derive_seed;

/// Months over which an unstable feature interpolates from its initial to its
/// final malware-side probability.
pub const DRIFT_INTERPOLATION_MONTHS: u32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableFeature {
    pub index: u32,
    pub p_benign: f64,
    pub p_malware: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnstableFeature {
    pub index: u32,
    pub p_benign: f64,
    pub p_malware_initial: f64,
    /// Zero-based dataset month at which the malware-side probability starts
    /// drifting toward `p_malware_final`.
    pub drift_month: u32,
    pub p_malware_final: f64,
}

impl UnstableFeature {
    /// Malware-side activation probability in dataset month `m`.
    pub fn p_malware_at(&self, month: u32) -> f64 {
        let t = (month.saturating_sub(self.drift_month) as f64
            / f64::from(DRIFT_INTERPOLATION_MONTHS))
        .min(1.0);
        self.p_malware_initial + t * (self.p_malware_final - self.p_malware_initial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyFeature {
    pub index: u32,
    /// Index into the family list (`0..n_families`).
    pub family: u32,
    pub p_active_in_family: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFeature {
    pub index: u32,
    pub p_both: f64,
}

/// Full recipe for a synthetic dataset. `family_schedule[m][f]` is the
/// prevalence weight of family `f` among malware generated in month `m`; each
/// row must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub dim: usize,
    /// First dataset month, `YYYY-MM`.
    pub start_month: String,
    pub n_train_months: u32,
    pub n_test_months: u32,
    pub samples_per_month: u32,
    pub benign_malware_ratio: f64,
    pub n_families: u32,
    pub family_schedule: Vec<Vec<f64>>,
    pub stable_features: Vec<StableFeature>,
    pub unstable_features: Vec<UnstableFeature>,
    pub family_features: Vec<FamilyFeature>,
    pub noise_features: Vec<NoiseFeature>,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn total_months(&self) -> u32 {
        self.n_train_months + self.n_test_months
    }

    pub fn start_date(&self) -> Result<NaiveDate> {
        let parts: Vec<&str> = self.start_month.split('-').collect();
        let parsed = (|| {
            if parts.len() != 2 {
                return None;
            }
            let year: i32 = parts[0].parse().ok()?;
            let month: u32 = parts[1].parse().ok()?;
            NaiveDate::from_ymd_opt(year, month, 1)
        })();
        parsed.ok_or_else(|| {
            Error::spec(format!(
                "start_month must be YYYY-MM, got {:?}",
                self.start_month
            ))
        })
    }

    /// Last day of the training period; samples after it are the test stream.
    pub fn train_cutoff(&self) -> Result<NaiveDate> {
        let start = self.start_date()?;
        Ok(add_months(start, self.n_train_months).pred_opt().expect("valid date"))
    }

    pub fn feature_roles(&self) -> FeatureRoles {
        FeatureRoles {
            stable: self.stable_features.iter().map(|f| f.index).collect(),
            unstable: self.unstable_features.iter().map(|f| f.index).collect(),
            family: self.family_features.iter().map(|f| f.index).collect(),
            noise: self.noise_features.iter().map(|f| f.index).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.start_date()?;
        if self.dim == 0 {
            return Err(Error::spec("dim must be positive"));
        }
        if self.total_months() == 0 {
            return Err(Error::spec("dataset must span at least one month"));
        }
        if self.benign_malware_ratio.is_nan() || self.benign_malware_ratio <= 0.0 {
            return Err(Error::spec("benign_malware_ratio must be positive"));
        }

        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::spec(format!("{name} probability {p} outside [0, 1]")))
            }
        };
        let mut seen = std::collections::HashSet::new();
        let mut check_index = |idx: u32| {
            if idx as usize >= self.dim {
                return Err(Error::spec(format!(
                    "feature index {idx} out of range for dim {}",
                    self.dim
                )));
            }
            if !seen.insert(idx) {
                return Err(Error::spec(format!(
                    "feature index {idx} assigned to more than one role"
                )));
            }
            Ok(())
        };
        for f in &self.stable_features {
            check_index(f.index)?;
            prob("stable p_benign", f.p_benign)?;
            prob("stable p_malware", f.p_malware)?;
        }
        for f in &self.unstable_features {
            check_index(f.index)?;
            prob("unstable p_benign", f.p_benign)?;
            prob("unstable p_malware_initial", f.p_malware_initial)?;
            prob("unstable p_malware_final", f.p_malware_final)?;
        }
        for f in &self.family_features {
            check_index(f.index)?;
            prob("family p_active_in_family", f.p_active_in_family)?;
            if f.family >= self.n_families {
                return Err(Error::spec(format!(
                    "family feature {} references family {} but n_families is {}",
                    f.index, f.family, self.n_families
                )));
            }
        }
        for f in &self.noise_features {
            check_index(f.index)?;
            prob("noise p_both", f.p_both)?;
        }

        if self.family_schedule.len() != self.total_months() as usize {
            return Err(Error::spec(format!(
                "family_schedule has {} rows but the dataset spans {} months",
                self.family_schedule.len(),
                self.total_months()
            )));
        }
        for (m, row) in self.family_schedule.iter().enumerate() {
            if row.len() != self.n_families as usize {
                return Err(Error::spec(format!(
                    "family_schedule month {m} has {} weights but n_families is {}",
                    row.len(),
                    self.n_families
                )));
            }
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::spec(format!(
                    "family_schedule month {m} has a negative weight"
                )));
            }
            let sum: f64 = row.iter().sum();
            if sum <= 0.0 {
                return Err(Error::spec(format!(
                    "family_schedule month {m} has no active families"
                )));
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::spec(format!(
                    "family_schedule month {m} weights sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Canonical name of family `f`.
pub fn family_name(f: u32) -> String {
    format!("fam{f:02}")
}

/// Samples a dataset from the spec. Deterministic: the same spec (including
/// seed) always yields the same dataset.
pub fn generate(spec: &GeneratorSpec) -> Result<TemporalDataset> {
    spec.validate()?;
    let start = spec.start_date()?;
    let p_malware = 1.0 / (1.0 + spec.benign_malware_ratio);
    let total_months = spec.total_months();

    let mut samples =
        Vec::with_capacity(total_months as usize * spec.samples_per_month as usize);
    let mut active = Vec::with_capacity(128);

    for m in 0..total_months {
        let month_start = add_months(start, m);
        let n_days = days_in_month(month_start.year(), month_start.month());
        let schedule = &spec.family_schedule[m as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "datagen-month", m.into()));

        for s in 0..spec.samples_per_month {
            let label = if rng.random::<f64>() < p_malware {
                Label::Malware
            } else {
                Label::Benign
            };
            let day = rng.random_range(1..=n_days);
            let family = match label {
                Label::Malware => Some(pick_family(schedule, &mut rng)),
                Label::Benign => None,
            };

            active.clear();
            for f in &spec.stable_features {
                let p = match label {
                    Label::Malware => f.p_malware,
                    Label::Benign => f.p_benign,
                };
                if rng.random::<f64>() < p {
                    active.push(f.index);
                }
            }
            for f in &spec.unstable_features {
                let p = match label {
                    Label::Malware => f.p_malware_at(m),
                    Label::Benign => f.p_benign,
                };
                if rng.random::<f64>() < p {
                    active.push(f.index);
                }
            }
            for f in &spec.family_features {
                if family == Some(f.family) && rng.random::<f64>() < f.p_active_in_family {
                    active.push(f.index);
                }
            }
            for f in &spec.noise_features {
                if rng.random::<f64>() < f.p_both {
                    active.push(f.index);
                }
            }
            active.sort_unstable();

            samples.push(Sample {
                id: format!("s{m:03}-{s:05}"),
                timestamp: NaiveDate::from_ymd_opt(month_start.year(), month_start.month(), day)
                    .expect("valid day"),
                label,
                family: family.map(family_name),
                features: active.clone(),
            });
        }
    }

    Ok(TemporalDataset::new(spec.dim, samples)?.with_feature_roles(spec.feature_roles()))
}

fn pick_family(weights: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 && w > 0.0 {
            return i as u32;
        }
    }
    // Falls here only on floating dust; take the last active family.
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .expect("validated schedule has an active family") as u32
}

/// The default benchmark recipe: 2,000 dimensions, 12 training months and 12
/// test months at ratio 8.3:1, with 10 stable features (gap 0.7), 10 unstable
/// features (gap 0.8 before drift, 0 after month 12), 20 family features over
/// 5 families (one of which first appears in month 12), and noise everywhere
/// else. Family prevalences shift over time.
pub fn default_spec(seed: u64) -> GeneratorSpec {
    let n_train = 12u32;
    let n_test = 12u32;
    let total = n_train + n_test;
    let n_families = 5u32;

    let mut family_schedule = Vec::with_capacity(total as usize);
    for m in 0..total {
        let t = f64::from(m);
        // fam00 dominates early and fades out before the test period; fam01
        // rises steadily; fam02 and fam03 fluctuate out of phase; fam04
        // first appears at month 12 and grows through the test period.
        let raw = [
            (0.42 - 0.04 * t).max(0.0),
            0.16 + 0.014 * t.min(16.0),
            0.16 + 0.04 * (0.6 * t + 1.0).sin(),
            0.10 + 0.03 * (0.8 * t + 3.0).sin(),
            if m < n_train { 0.0 } else { 0.24 + 0.015 * (t - 12.0) },
        ];
        let sum: f64 = raw.iter().sum();
        family_schedule.push(raw.iter().map(|w| w / sum).collect());
    }

    // Stable features are informative but noisy on the benign side, so a
    // detector must combine several of them. Unstable features start with a
    // clean 0.8 gap and keep firing after the drift with no gap at all:
    // weight placed on them costs recall once the malware side decays.
    let stable_features = (0..10)
        .map(|i| StableFeature {
            index: i,
            p_benign: 0.22,
            p_malware: 0.92,
        })
        .collect();
    let unstable_features = (10..20)
        .map(|i| UnstableFeature {
            index: i,
            p_benign: 0.20,
            p_malware_initial: 1.0,
            drift_month: 6,
            p_malware_final: 0.30,
        })
        .collect();
    // Four signature features per family; a thin slice of every family
    // carries none of them.
    let family_features = (20..40)
        .map(|i| FamilyFeature {
            index: i,
            family: (i - 20) / 4,
            p_active_in_family: 0.85,
        })
        .collect();
    let noise_levels = [0.001, 0.002, 0.005, 0.01];
    let noise_features = (40..2000)
        .map(|i| NoiseFeature {
            index: i,
            p_both: noise_levels[(i as usize) % noise_levels.len()],
        })
        .collect();

    GeneratorSpec {
        dim: 2000,
        start_month: "2014-01".to_string(),
        n_train_months: n_train,
        n_test_months: n_test,
        samples_per_month: 800,
        benign_malware_ratio: 8.3,
        n_families,
        family_schedule,
        stable_features,
        unstable_features,
        family_features,
        noise_features,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{months_between, write_dataset};

    /// Counting oracle: per-month, per-class activation ratio of one feature.
    fn active_ratio_oracle(
        ds: &TemporalDataset,
        feature: u32,
        month: u32,
        label: Label,
    ) -> (f64, usize) {
        let t0 = ds.t_min();
        let mut hits = 0usize;
        let mut n = 0usize;
        for s in ds.samples() {
            if months_between(t0, s.timestamp) as u32 == month && s.label == label {
                n += 1;
                if s.features.binary_search(&feature).is_ok() {
                    hits += 1;
                }
            }
        }
        (hits as f64 / n.max(1) as f64, n)
    }

    fn tiny_spec(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            dim: 16,
            start_month: "2014-01".to_string(),
            n_train_months: 2,
            n_test_months: 0,
            samples_per_month: 10_000,
            benign_malware_ratio: 8.3,
            n_families: 1,
            family_schedule: vec![vec![1.0]; 2],
            stable_features: vec![StableFeature {
                index: 7,
                p_benign: 0.05,
                p_malware: 0.75,
            }],
            unstable_features: vec![],
            family_features: vec![],
            noise_features: vec![NoiseFeature {
                index: 3,
                p_both: 0.2,
            }],
            seed,
        }
    }

    #[test]
    fn planted_stable_gap_measured_within_tolerance() {
        let ds = generate(&tiny_spec(11)).unwrap();
        for month in 0..2 {
            let (r_mal, n_mal) = active_ratio_oracle(&ds, 7, month, Label::Malware);
            let (r_ben, n_ben) = active_ratio_oracle(&ds, 7, month, Label::Benign);
            assert!(n_mal > 500 && n_ben > 5000);
            let gap = r_mal - r_ben;
            assert!(
                (gap - 0.70).abs() <= 0.03,
                "month {month}: measured gap {gap}"
            );
        }
    }

    #[test]
    fn class_ratio_matches_spec() {
        let ds = generate(&tiny_spec(11)).unwrap();
        for month in 0..2 {
            let (_, n_mal) = active_ratio_oracle(&ds, 7, month, Label::Malware);
            let frac = n_mal as f64 / 10_000.0;
            assert!(
                (frac - 1.0 / 9.3).abs() <= 0.01,
                "month {month}: malware fraction {frac}"
            );
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&tiny_spec(42)).unwrap();
        let b = generate(&tiny_spec(42)).unwrap();
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        write_dataset(&a, da.path()).unwrap();
        write_dataset(&b, db.path()).unwrap();
        for name in ["meta.json", "samples.jsonl"] {
            let ba = std::fs::read(da.path().join(name)).unwrap();
            let bb = std::fs::read(db.path().join(name)).unwrap();
            assert_eq!(ba, bb, "{name} differs between identically seeded runs");
        }
        let c = generate(&tiny_spec(43)).unwrap();
        assert_ne!(a, c, "different seeds should differ");
    }

    #[test]
    fn generated_dataset_round_trips() {
        let mut spec = tiny_spec(7);
        spec.samples_per_month = 5_000;
        let ds = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = crate::data::read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn overlapping_roles_rejected() {
        let mut spec = tiny_spec(1);
        spec.noise_features[0].index = 7; // collides with the stable feature
        match generate(&spec) {
            Err(Error::Spec(msg)) => assert!(msg.contains("more than one role")),
            other => panic!("expected spec error, got {other:?}"),
        }
    }

    #[test]
    fn empty_family_schedule_rejected() {
        let mut spec = tiny_spec(1);
        spec.family_schedule[1] = vec![0.0];
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn unstable_feature_interpolates_over_six_months() {
        let f = UnstableFeature {
            index: 0,
            p_benign: 0.05,
            p_malware_initial: 0.85,
            drift_month: 6,
            p_malware_final: 0.05,
        };
        assert_eq!(f.p_malware_at(0), 0.85);
        assert_eq!(f.p_malware_at(6), 0.85);
        assert!((f.p_malware_at(9) - 0.45).abs() < 1e-12);
        assert!((f.p_malware_at(12) - 0.05).abs() < 1e-12);
        assert!((f.p_malware_at(20) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn planted_gap_fidelity_binomial_bound() {
        // 3-sigma per-month fidelity for every planted feature, checked with
        // the counting oracle on a fixed seed.
        let spec = GeneratorSpec {
            dim: 64,
            start_month: "2014-01".to_string(),
            n_train_months: 3,
            n_test_months: 0,
            samples_per_month: 4_000,
            benign_malware_ratio: 4.0,
            n_families: 1,
            family_schedule: vec![vec![1.0]; 3],
            stable_features: vec![
                StableFeature { index: 0, p_benign: 0.10, p_malware: 0.80 },
                StableFeature { index: 5, p_benign: 0.30, p_malware: 0.90 },
            ],
            unstable_features: vec![UnstableFeature {
                index: 9,
                p_benign: 0.05,
                p_malware_initial: 0.95,
                drift_month: 1,
                p_malware_final: 0.05,
            }],
            family_features: vec![],
            noise_features: vec![NoiseFeature { index: 20, p_both: 0.5 }],
            seed: 5,
        };
        let ds = generate(&spec).unwrap();
        let sigma = |p: f64, n: usize| (p * (1.0 - p) / n as f64).sqrt();

        for month in 0..3 {
            let check = |idx: u32, p_b: f64, p_m: f64| {
                let (r_mal, n_mal) = active_ratio_oracle(&ds, idx, month, Label::Malware);
                let (r_ben, n_ben) = active_ratio_oracle(&ds, idx, month, Label::Benign);
                let gap = (r_mal - r_ben).abs();
                let want = (p_m - p_b).abs();
                let bound = 3.0 * (sigma(p_m, n_mal) + sigma(p_b, n_ben));
                assert!(
                    (gap - want).abs() <= bound,
                    "feature {idx} month {month}: gap {gap} vs {want} (bound {bound})"
                );
            };
            check(0, 0.10, 0.80);
            check(5, 0.30, 0.90);
            let unstable_p = spec.unstable_features[0].p_malware_at(month);
            check(9, 0.05, unstable_p);
            check(20, 0.5, 0.5);
        }
    }

    #[test]
    fn default_spec_is_valid_and_schedules_open_world_family() {
        let spec = default_spec(1);
        spec.validate().unwrap();
        assert_eq!(spec.dim, 2000);
        assert_eq!(spec.total_months(), 24);
        // the open-world family is absent during training, present afterwards
        for m in 0..12 {
            assert_eq!(spec.family_schedule[m][4], 0.0);
        }
        for m in 12..24 {
            assert!(spec.family_schedule[m][4] > 0.15);
        }
        assert_eq!(
            spec.train_cutoff().unwrap(),
            NaiveDate::from_ymd_opt(2014, 12, 31).unwrap()
        );
    }
}
