//! Temporal environment segmentation.
//!
//! Training samples are assigned to environments by observation date:
//! `env = floor((t - t_min) / Δ)` with Δ one calendar month or one quarter,
//! or by cutting the time-ordered sample list into `n` near-equal contiguous
//! blocks. Calendar units are used rather than fixed day strides, so a
//! "month" is a month-of-year regardless of its length.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{months_between, TemporalDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Monthly,
    Quarterly,
    EqualCount(usize),
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::Monthly => write!(f, "monthly"),
            Granularity::Quarterly => write!(f, "quarterly"),
            Granularity::EqualCount(n) => write!(f, "equal_count({n})"),
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monthly" => Ok(Granularity::Monthly),
            "quarterly" => Ok(Granularity::Quarterly),
            other => {
                let n = other
                    .strip_prefix("equal_count:")
                    .or_else(|| other.strip_prefix("equal:"))
                    .and_then(|v| v.parse::<usize>().ok());
                n.map(Granularity::EqualCount).ok_or_else(|| {
                    Error::spec(format!(
                        "unknown granularity {other:?} (expected monthly, quarterly or equal:<n>)"
                    ))
                })
            }
        }
    }
}

/// A partition of a dataset's samples into contiguous-in-time environments,
/// indexed from 0 (oldest) upward.
#[derive(Debug, Clone)]
pub struct EnvironmentAssignment {
    granularity: Granularity,
    env_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    labels: Vec<String>,
    warnings: Vec<String>,
}

impl EnvironmentAssignment {
    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn env_count(&self) -> usize {
        self.members.len()
    }

    /// Environment of the sample at position `idx` in dataset order.
    pub fn env_of(&self, idx: usize) -> usize {
        self.env_of[idx]
    }

    pub fn env_of_all(&self) -> &[usize] {
        &self.env_of
    }

    /// Sample positions belonging to environment `e`, in dataset order.
    pub fn members(&self, e: usize) -> &[usize] {
        &self.members[e]
    }

    /// Human-readable boundary label for environment `e` (a month, a quarter
    /// or a block range).
    pub fn label(&self, e: usize) -> &str {
        &self.labels[e]
    }

    /// Non-fatal observations made at split time, e.g. single-class
    /// environments. The trainer decides how to handle them.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Extends an assignment computed over the prefix of `full` dated at or
    /// before `cutoff` to the whole dataset: every later sample joins the
    /// newest environment. Continual updates use this to place freshly
    /// labeled drift samples.
    pub fn extend_with_overflow(
        &self,
        full: &TemporalDataset,
        cutoff: chrono::NaiveDate,
    ) -> Result<EnvironmentAssignment> {
        let n_within = self.env_of.len();
        let within_count = full
            .samples()
            .iter()
            .filter(|s| s.timestamp <= cutoff)
            .count();
        if within_count != n_within {
            return Err(Error::schema(format!(
                "assignment covers {n_within} samples but {within_count} fall before {cutoff}"
            )));
        }
        let last = self.env_count().checked_sub(1).ok_or_else(|| {
            Error::spec("cannot extend an assignment with zero environments")
        })?;
        let mut env_of = self.env_of.clone();
        let mut members = self.members.clone();
        for i in n_within..full.len() {
            env_of.push(last);
            members[last].push(i);
        }
        Ok(EnvironmentAssignment {
            granularity: self.granularity,
            env_of,
            members,
            labels: self.labels.clone(),
            warnings: self.warnings.clone(),
        })
    }

    /// Serializes as `environments.json`.
    pub fn write_json(&self, ds: &TemporalDataset, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct EnvOut<'a> {
            index: usize,
            label: &'a str,
            sample_ids: Vec<&'a str>,
        }
        #[derive(Serialize)]
        struct Out<'a> {
            granularity: String,
            envs: Vec<EnvOut<'a>>,
        }
        let out = Out {
            granularity: self.granularity.to_string(),
            envs: (0..self.env_count())
                .map(|e| EnvOut {
                    index: e,
                    label: self.label(e),
                    sample_ids: self.members(e)
                        .iter()
                        .map(|&i| ds.samples()[i].id.as_str())
                        .collect(),
                })
                .collect(),
        };
        let mut bytes = serde_json::to_vec_pretty(&out)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// Assigns every sample of `ds` to a temporal environment.
pub fn split(ds: &TemporalDataset, granularity: Granularity) -> Result<EnvironmentAssignment> {
    if ds.is_empty() {
        return Err(Error::spec("cannot split an empty dataset"));
    }
    let n = ds.len();

    let (raw, labels_of_raw): (Vec<usize>, Box<dyn Fn(usize) -> String>) = match granularity {
        Granularity::Monthly | Granularity::Quarterly => {
            let div: i32 = if granularity == Granularity::Monthly { 1 } else { 3 };
            let t0 = ds.t_min();
            let raw: Vec<usize> = ds
                .samples()
                .iter()
                .map(|s| (months_between(t0, s.timestamp) / div) as usize)
                .collect();
            let label = move |g: usize| {
                let month0 = crate::data::month_index(t0) + g as i32 * div;
                let year = month0.div_euclid(12);
                let month = month0.rem_euclid(12) + 1;
                if div == 1 {
                    format!("{year:04}-{month:02}")
                } else {
                    format!("{year:04}-Q{}", (month - 1) / 3 + 1)
                }
            };
            (raw, Box::new(label))
        }
        Granularity::EqualCount(k) => {
            if k == 0 {
                return Err(Error::spec("equal_count granularity needs n >= 1"));
            }
            if k > n {
                return Err(Error::spec(format!(
                    "equal_count({k}) exceeds the {n} available samples"
                )));
            }
            // First (n % k) blocks take one extra sample; sizes differ by <= 1.
            let base = n / k;
            let extra = n % k;
            let mut raw = Vec::with_capacity(n);
            for block in 0..k {
                let size = base + usize::from(block < extra);
                raw.extend(std::iter::repeat_n(block, size));
            }
            (raw, Box::new(|g: usize| format!("block{g:02}")))
        }
    };

    // Compact raw indices (calendar gaps leave empty bins) while preserving order.
    let present: BTreeSet<usize> = raw.iter().copied().collect();
    let remap: std::collections::HashMap<usize, usize> = present
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();
    let env_of: Vec<usize> = raw.iter().map(|r| remap[r]).collect();
    let env_count = present.len();

    let mut members = vec![Vec::new(); env_count];
    for (i, &e) in env_of.iter().enumerate() {
        members[e].push(i);
    }
    let labels: Vec<String> = present.iter().map(|&g| labels_of_raw(g)).collect();

    let mut warnings = Vec::new();
    for (e, idxs) in members.iter().enumerate() {
        let mut has = [false, false];
        for &i in idxs {
            has[ds.samples()[i].label.as_u8() as usize] = true;
        }
        if !(has[0] && has[1]) {
            let class = if has[1] { "malware" } else { "benign" };
            warnings.push(format!(
                "environment {e} ({}) contains only {class} samples",
                labels[e]
            ));
        }
    }

    Ok(EnvironmentAssignment {
        granularity,
        env_of,
        members,
        labels,
        warnings,
    })
}
