//! Core dataset types and the on-disk dataset format.
//!
//! A dataset is a directory with two files:
//!
//! * `meta.json` — dimension, time span and (for synthetic data) the planted
//!   feature roles.
//! * `samples.jsonl` — one JSON object per line with keys `id`, `timestamp`,
//!   `label`, `family`, `features`. UTF-8, LF line endings.
//!
//! Samples are kept in a total, deterministic order: ascending timestamp with
//! ties broken by id. Feature vectors are sparse: a sorted list of the active
//! indices of a binary vector in `{0,1}^dim`.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary class label. Benign serializes as 0, malware as 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Benign,
    Malware,
}

impl Label {
    pub fn is_malware(self) -> bool {
        matches!(self, Label::Malware)
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Malware => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malware),
            other => Err(Error::spec(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// One observation: a sparse binary feature vector with a day-resolution
/// timestamp, a class label and an optional family tag (malware only).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Serialized as `YYYY-MM-DD`.
    #[serde(with = "date_format")]
    pub timestamp: NaiveDate,
    pub label: Label,
    pub family: Option<String>,
    /// Strictly increasing active feature indices, all in `[0, dim)`.
    pub features: Vec<u32>,
}

mod date_format {
    use chrono::NaiveDate;
    use serde::{self, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &NaiveDate, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&d.format("%Y-%m-%d").to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDate, D::Error> {
        let raw = String::deserialize(d)?;
        NaiveDate::parse_from_str(&raw, "%Y-%m-%d").map_err(serde::de::Error::custom)
    }
}

impl Sample {
    /// Validates the per-sample invariants against a feature dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        for pair in self.features.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::spec(format!(
                    "sample {}: feature indices not strictly increasing ({} then {})",
                    self.id, pair[0], pair[1]
                )));
            }
        }
        if let Some(&last) = self.features.last() {
            if last as usize >= dim {
                return Err(Error::spec(format!(
                    "sample {}: feature index {last} out of range for dim {dim}",
                    self.id
                )));
            }
        }
        match (self.label, &self.family) {
            (Label::Benign, Some(_)) => Err(Error::spec(format!(
                "sample {}: benign sample carries a family tag",
                self.id
            ))),
            (Label::Malware, None) => Err(Error::spec(format!(
                "sample {}: malware sample lacks a family tag",
                self.id
            ))),
            _ => Ok(()),
        }
    }
}

/// Ground-truth roles of planted features; present only for synthetic data.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRoles {
    pub stable: Vec<u32>,
    pub unstable: Vec<u32>,
    pub family: Vec<u32>,
    pub noise: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    dim: usize,
    #[serde(with = "date_format")]
    t_min: NaiveDate,
    #[serde(with = "date_format")]
    t_max: NaiveDate,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_roles: Option<FeatureRoles>,
}

/// Sentinel date used for the span of an empty dataset.
fn epoch_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

/// A time-ordered multiset of samples plus dimension metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalDataset {
    dim: usize,
    samples: Vec<Sample>,
    t_min: NaiveDate,
    t_max: NaiveDate,
    feature_roles: Option<FeatureRoles>,
}

impl TemporalDataset {
    /// Builds a dataset, sorting samples by `(timestamp, id)` and checking
    /// every invariant. Ids must be unique so the ordering is total.
    pub fn new(dim: usize, mut samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            s.validate(dim)?;
        }
        samples.sort_by(|a, b| (a.timestamp, &a.id).cmp(&(b.timestamp, &b.id)));
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::spec(format!("duplicate sample id {}", s.id)));
            }
        }
        let (t_min, t_max) = match (samples.first(), samples.last()) {
            (Some(first), Some(last)) => (first.timestamp, last.timestamp),
            _ => (epoch_date(), epoch_date()),
        };
        Ok(TemporalDataset {
            dim,
            samples,
            t_min,
            t_max,
            feature_roles: None,
        })
    }

    pub fn with_feature_roles(mut self, roles: FeatureRoles) -> Self {
        self.feature_roles = Some(roles);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn t_min(&self) -> NaiveDate {
        self.t_min
    }

    pub fn t_max(&self) -> NaiveDate {
        self.t_max
    }

    pub fn feature_roles(&self) -> Option<&FeatureRoles> {
        self.feature_roles.as_ref()
    }

    /// New dataset containing the samples selected by `keep`, preserving
    /// order, dimension and feature roles.
    pub fn filter(&self, mut keep: impl FnMut(&Sample) -> bool) -> Self {
        let samples: Vec<Sample> = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        let (t_min, t_max) = match (samples.first(), samples.last()) {
            (Some(first), Some(last)) => (first.timestamp, last.timestamp),
            _ => (epoch_date(), epoch_date()),
        };
        TemporalDataset {
            dim: self.dim,
            samples,
            t_min,
            t_max,
            feature_roles: self.feature_roles.clone(),
        }
    }

    /// Splits on a date boundary: samples up to and including `cutoff`
    /// versus strictly later ones.
    pub fn split_at_date(&self, cutoff: NaiveDate) -> (Self, Self) {
        (
            self.filter(|s| s.timestamp <= cutoff),
            self.filter(|s| s.timestamp > cutoff),
        )
    }

    /// Appends extra samples (continual-learning updates), re-validating and
    /// re-sorting. Feature roles carry over.
    pub fn extend(&self, extra: impl IntoIterator<Item = Sample>) -> Result<Self> {
        let mut samples = self.samples.clone();
        samples.extend(extra);
        let roles = self.feature_roles.clone();
        let mut ds = TemporalDataset::new(self.dim, samples)?;
        ds.feature_roles = roles;
        Ok(ds)
    }
}

/// Writes `meta.json` and `samples.jsonl` under `dir`, creating it if needed.
/// Output bytes are a pure function of the dataset.
pub fn write_dataset(ds: &TemporalDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        dim: ds.dim,
        t_min: ds.t_min,
        t_max: ds.t_max,
        feature_roles: ds.feature_roles.clone(),
    };
    let mut meta_bytes = serde_json::to_vec_pretty(&meta)?;
    meta_bytes.push(b'\n');
    std::fs::write(dir.join("meta.json"), meta_bytes)?;

    let file = std::fs::File::create(dir.join("samples.jsonl"))?;
    let mut w = BufWriter::new(file);
    for s in &ds.samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset directory written by [`write_dataset`] (or by hand).
/// Errors name the offending file and line.
pub fn read_dataset(dir: &Path) -> Result<TemporalDataset> {
    let meta_path = dir.join("meta.json");
    let meta_raw = std::fs::read_to_string(&meta_path)?;
    let meta: DatasetMeta = serde_json::from_str(&meta_raw).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if meta.t_min > meta.t_max {
        return Err(Error::Parse {
            path: meta_path,
            line: 1,
            msg: format!("t_min {} is after t_max {}", meta.t_min, meta.t_max),
        });
    }

    let samples_path = dir.join("samples.jsonl");
    let file = std::fs::File::open(&samples_path)?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: samples_path.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        sample.validate(meta.dim).map_err(|e| Error::Parse {
            path: samples_path.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        samples.push(sample);
    }

    let mut ds = TemporalDataset::new(meta.dim, samples)?;
    if !ds.is_empty() && (ds.t_min != meta.t_min || ds.t_max != meta.t_max) {
        return Err(Error::Parse {
            path: meta_path,
            line: 1,
            msg: format!(
                "header span {}..{} disagrees with samples {}..{}",
                meta.t_min, meta.t_max, ds.t_min, ds.t_max
            ),
        });
    }
    ds.feature_roles = meta.feature_roles;
    Ok(ds)
}

/// Hashes a dataset directory's two files (FNV-1a over raw bytes). Used by
/// run manifests to pin inputs.
pub fn dataset_fingerprint(dir: &Path) -> Result<u64> {
    let mut h = crate::util::Fnv64::new();
    for name in ["meta.json", "samples.jsonl"] {
        h.update(&std::fs::read(dir.join(name))?);
    }
    Ok(h.finish())
}

/// Helpers for calendar-month arithmetic shared by the splitter, the
/// generator and windowed metrics.
pub fn month_index(date: NaiveDate) -> i32 {
    use chrono::Datelike;
    date.year() * 12 + date.month0() as i32
}

pub fn months_between(earlier: NaiveDate, later: NaiveDate) -> i32 {
    month_index(later) - month_index(earlier)
}

/// First day of the month `offset` calendar months after `base`'s month.
pub fn add_months(base: NaiveDate, offset: u32) -> NaiveDate {
    
    let idx = month_index(base) + offset as i32;
    let year = idx.div_euclid(12);
    let month0 = idx.rem_euclid(12) as u32;
    NaiveDate::from_ymd_opt(year, month0 + 1, 1).expect("valid month arithmetic")
}

pub fn days_in_month(year: i32, month: u32) -> u32 {
    let first = NaiveDate::from_ymd_opt(year, month, 1).expect("valid date");
    let next = add_months(first, 1);
    next.signed_duration_since(first).num_days() as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, date: &str, label: Label, family: Option<&str>, feats: &[u32]) -> Sample {
        Sample {
            id: id.to_string(),
            timestamp: NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap(),
            label,
            family: family.map(str::to_string),
            features: feats.to_vec(),
        }
    }

    #[test]
    fn ordering_is_timestamp_then_id() {
        let ds = TemporalDataset::new(
            8,
            vec![
                sample("b", "2014-02-01", Label::Benign, None, &[1]),
                sample("a", "2014-02-01", Label::Benign, None, &[0]),
                sample("z", "2014-01-05", Label::Malware, Some("f"), &[2]),
            ],
        )
        .unwrap();
        let ids: Vec<&str> = ds.samples().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["z", "a", "b"]);
        assert_eq!(ds.t_min(), NaiveDate::from_ymd_opt(2014, 1, 5).unwrap());
        assert_eq!(ds.t_max(), NaiveDate::from_ymd_opt(2014, 2, 1).unwrap());
    }

    #[test]
    fn rejects_invalid_samples() {
        // non-increasing features
        assert!(TemporalDataset::new(
            8,
            vec![sample("a", "2014-01-01", Label::Benign, None, &[3, 3])]
        )
        .is_err());
        // index out of range
        assert!(TemporalDataset::new(
            8,
            vec![sample("a", "2014-01-01", Label::Benign, None, &[8])]
        )
        .is_err());
        // benign with family
        assert!(TemporalDataset::new(
            8,
            vec![sample("a", "2014-01-01", Label::Benign, Some("f"), &[1])]
        )
        .is_err());
        // malware without family
        assert!(TemporalDataset::new(
            8,
            vec![sample("a", "2014-01-01", Label::Malware, None, &[1])]
        )
        .is_err());
        // duplicate ids
        assert!(TemporalDataset::new(
            8,
            vec![
                sample("a", "2014-01-01", Label::Benign, None, &[1]),
                sample("a", "2014-01-02", Label::Benign, None, &[1]),
            ]
        )
        .is_err());
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = TemporalDataset::new(16, vec![]).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn hand_written_fixture_parses_literally() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("meta.json"),
            r#"{"dim": 10, "t_min": "2015-01-02", "t_max": "2015-03-04"}"#,
        )
        .unwrap();
        std::fs::write(
            dir.path().join("samples.jsonl"),
            concat!(
                r#"{"id":"x1","timestamp":"2015-01-02","label":0,"family":null,"features":[0,3,9]}"#, "\n",
                r#"{"id":"x2","timestamp":"2015-02-10","label":1,"family":"dowgin","features":[]}"#, "\n",
                r#"{"id":"x3","timestamp":"2015-03-04","label":1,"family":"kuguo","features":[5]}"#, "\n",
            ),
        )
        .unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.dim(), 10);
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.samples()[0].features, vec![0, 3, 9]);
        assert_eq!(ds.samples()[1].label, Label::Malware);
        assert_eq!(ds.samples()[1].family.as_deref(), Some("dowgin"));
        assert!(ds.samples()[1].features.is_empty());
        assert_eq!(ds.samples()[2].id, "x3");
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("meta.json"),
            r#"{"dim": 4, "t_min": "2015-01-01", "t_max": "2015-01-01"}"#,
        )
        .unwrap();
        std::fs::write(
            dir.path().join("samples.jsonl"),
            concat!(
                r#"{"id":"a","timestamp":"2015-01-01","label":0,"family":null,"features":[]}"#, "\n",
                r#"{"id":"b","timestamp":"2015-01-01","label":0,"family":null,"features":[7]}"#, "\n",
            ),
        )
        .unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_monotone_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("meta.json"),
            r#"{"dim": 4, "t_min": "2016-01-01", "t_max": "2015-01-01"}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("samples.jsonl"), "").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn month_arithmetic() {
        let d = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        assert_eq!(months_between(d("2014-01-01"), d("2014-03-15")), 2);
        assert_eq!(months_between(d("2014-12-31"), d("2015-01-01")), 1);
        assert_eq!(add_months(d("2014-01-20"), 13), d("2015-02-01"));
        assert_eq!(days_in_month(2016, 2), 29);
        assert_eq!(days_in_month(2015, 2), 28);
    }
}
