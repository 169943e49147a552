// SPDX-License-Identifier: MIT OR Apache-2.0

//! Time-series collections, CSV ingestion and preprocessing.
//!
//! The CSV layout is `id,t,<feature_1>,...,<feature_K>` with one row per
//! individual and timestep. Empty cells are missing. Timesteps of one
//! individual must be consecutive integers but may start anywhere.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Binary,
    Continuous,
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(FeatureKind::Binary),
            "continuous" => Ok(FeatureKind::Continuous),
            other => Err(Error::param(format!("unknown feature kind {other:?}"))),
        }
    }
}

/// One individual's `T × K` observation matrix with a per-cell mask.
///
/// Values are stored row-major. Unobserved cells hold `0.0` so that equality
/// comparisons stay meaningful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualSeries {
    pub id: String,
    /// Timestep label of the first row, as read from the input.
    pub start: i64,
    n_features: usize,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl IndividualSeries {
    /// Builds a series from row-major values and mask. Unobserved values are
    /// zeroed.
    pub fn new(
        id: impl Into<String>,
        start: i64,
        n_features: usize,
        mut values: Vec<f64>,
        observed: Vec<bool>,
    ) -> Result<Self> {
        let id = id.into();
        if n_features == 0 {
            return Err(Error::InvalidDataset("zero features".into()));
        }
        if values.len() != observed.len() || values.len() % n_features != 0 {
            return Err(Error::InvalidDataset(format!(
                "series {id:?}: {} values and {} mask cells do not form rows of {n_features}",
                values.len(),
                observed.len()
            )));
        }
        if values.is_empty() {
            return Err(Error::InvalidDataset(format!(
                "series {id:?} has no timesteps"
            )));
        }
        for (v, &o) in values.iter_mut().zip(&observed) {
            if !o {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::InvalidDataset(format!(
                    "series {id:?} has a non-finite observed value"
                )));
            }
        }
        Ok(IndividualSeries {
            id,
            start,
            n_features,
            values,
            observed,
        })
    }

    /// Builds a series from rows of optional values (`None` = missing).
    pub fn from_rows(id: impl Into<String>, rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * k);
        let mut observed = Vec::with_capacity(rows.len() * k);
        for row in rows {
            if row.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    found: row.len(),
                });
            }
            for cell in row {
                values.push(cell.unwrap_or(0.0));
                observed.push(cell.is_some());
            }
        }
        Self::new(id, 0, k, values, observed)
    }

    /// Number of timesteps.
    pub fn len(&self) -> usize {
        self.values.len() / self.n_features
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, t: usize) -> (&[f64], &[bool]) {
        let k = self.n_features;
        (
            &self.values[t * k..(t + 1) * k],
            &self.observed[t * k..(t + 1) * k],
        )
    }

    pub fn value(&self, t: usize, k: usize) -> Option<f64> {
        let i = t * self.n_features + k;
        self.observed[i].then_some(self.values[i])
    }

    pub fn is_observed(&self, t: usize, k: usize) -> bool {
        self.observed[t * self.n_features + k]
    }

    /// True if at least one feature is observed at `t`.
    pub fn any_observed(&self, t: usize) -> bool {
        self.row(t).1.iter().any(|&o| o)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observed_mask(&self) -> &[bool] {
        &self.observed
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Column `k` as optional values.
    pub fn feature(&self, k: usize) -> Vec<Option<f64>> {
        (0..self.len()).map(|t| self.value(t, k)).collect()
    }

    fn set(&mut self, t: usize, k: usize, value: Option<f64>) {
        let i = t * self.n_features + k;
        self.values[i] = value.unwrap_or(0.0);
        self.observed[i] = value.is_some();
    }
}

/// A population of series sharing the same features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub series: Vec<IndividualSeries>,
    pub feature_names: Vec<String>,
    pub kind: FeatureKind,
}

impl TimeSeriesDataset {
    pub fn new(
        series: Vec<IndividualSeries>,
        feature_names: Vec<String>,
        kind: FeatureKind,
    ) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = feature_names.len();
        let mut ids = HashSet::new();
        for s in &series {
            if s.n_features() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    found: s.n_features(),
                });
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate id {:?}", s.id)));
            }
            if kind == FeatureKind::Binary {
                for t in 0..s.len() {
                    for (f, name) in feature_names.iter().enumerate() {
                        if let Some(v) = s.value(t, f) {
                            if v != 0.0 && v != 1.0 {
                                return Err(Error::BinaryDomain {
                                    id: s.id.clone(),
                                    t: s.start + t as i64,
                                    feature: name.clone(),
                                    value: v,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(TimeSeriesDataset {
            series,
            feature_names,
            kind,
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Total number of observed cells.
    pub fn observed_cells(&self) -> usize {
        self.series
            .iter()
            .map(IndividualSeries::observed_count)
            .sum()
    }

    /// A dataset holding the series at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let series = indices.iter().map(|&i| self.series[i].clone()).collect();
        Self::new(series, self.feature_names.clone(), self.kind)
    }

    /// Per-feature mean and population standard deviation over observed cells.
    /// Features with no observations report `(0, 0)`.
    pub fn feature_moments(&self) -> Vec<(f64, f64)> {
        let k = self.n_features();
        let mut n = vec![0usize; k];
        let mut sum = vec![0.0; k];
        for s in &self.series {
            for t in 0..s.len() {
                for f in 0..k {
                    if let Some(v) = s.value(t, f) {
                        n[f] += 1;
                        sum[f] += v;
                    }
                }
            }
        }
        let means: Vec<f64> = (0..k)
            .map(|f| if n[f] > 0 { sum[f] / n[f] as f64 } else { 0.0 })
            .collect();
        let mut ss = vec![0.0; k];
        for s in &self.series {
            for t in 0..s.len() {
                for f in 0..k {
                    if let Some(v) = s.value(t, f) {
                        ss[f] += (v - means[f]).powi(2);
                    }
                }
            }
        }
        (0..k)
            .map(|f| {
                let sd = if n[f] > 0 {
                    (ss[f] / n[f] as f64).sqrt()
                } else {
                    0.0
                };
                (means[f], sd)
            })
            .collect()
    }
}

/// Reads a dataset from a CSV file.
pub fn load_csv(path: impl AsRef<Path>, kind: FeatureKind) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, kind)
}

/// Reads a dataset from any CSV source.
pub fn read_csv<R: Read>(reader: R, kind: FeatureKind) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "t" {
        return Err(Error::MalformedHeader(format!(
            "expected `id,t,<feature>...`, found `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let feature_names: Vec<String> = header.iter().skip(2).map(str::to_owned).collect();
    if feature_names.iter().any(String::is_empty) {
        return Err(Error::MalformedHeader("empty feature name".into()));
    }
    let k = feature_names.len();

    let mut rows: BTreeMap<String, Vec<(i64, Vec<Option<f64>>)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != k + 2 {
            return Err(Error::MalformedHeader(format!(
                "line {line}: {} fields, header has {}",
                rec.len(),
                k + 2
            )));
        }
        let t: i64 = rec[1].parse().map_err(|_| Error::NonNumeric {
            line,
            column: "t".into(),
            value: rec[1].to_owned(),
        })?;
        let mut cells = Vec::with_capacity(k);
        for (f, raw) in rec.iter().skip(2).enumerate() {
            if raw.is_empty() {
                cells.push(None);
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| Error::NonNumeric {
                line,
                column: feature_names[f].clone(),
                value: raw.to_owned(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    line,
                    column: feature_names[f].clone(),
                    value: raw.to_owned(),
                });
            }
            if kind == FeatureKind::Binary && v != 0.0 && v != 1.0 {
                return Err(Error::BinaryDomain {
                    id: rec[0].to_owned(),
                    t,
                    feature: feature_names[f].clone(),
                    value: v,
                });
            }
            cells.push(Some(v));
        }
        rows.entry(rec[0].to_owned()).or_default().push((t, cells));
    }

    let mut series = Vec::with_capacity(rows.len());
    for (id, mut entries) in rows {
        entries.sort_by_key(|(t, _)| *t);
        for w in entries.windows(2) {
            if w[1].0 != w[0].0 + 1 {
                return Err(Error::NonConsecutive {
                    id,
                    previous: w[0].0,
                    found: w[1].0,
                });
            }
        }
        let start = entries[0].0;
        let mut values = Vec::with_capacity(entries.len() * k);
        let mut observed = Vec::with_capacity(entries.len() * k);
        for (_, cells) in entries {
            for c in cells {
                values.push(c.unwrap_or(0.0));
                observed.push(c.is_some());
            }
        }
        series.push(IndividualSeries::new(id, start, k, values, observed)?);
    }
    TimeSeriesDataset::new(series, feature_names, kind)
}

/// Writes a dataset in the format accepted by [`read_csv`].
pub fn write_csv<W: Write>(ds: &TimeSeriesDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_owned(), "t".to_owned()];
    header.extend(ds.feature_names.iter().cloned());
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for s in &ds.series {
        for t in 0..s.len() {
            record.clear();
            record.push(s.id.clone());
            record.push((s.start + t as i64).to_string());
            for k in 0..s.n_features() {
                record.push(s.value(t, k).map_or_else(String::new, |v| v.to_string()));
            }
            w.write_record(&record)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Applies the "logged anything" convention to binary data: a timestep where
/// at least one feature was logged has its unlogged features set to observed
/// zeros; fully unlogged timesteps stay missing.
pub fn apply_binary_missing_rule(mut ds: TimeSeriesDataset) -> Result<TimeSeriesDataset> {
    if ds.kind != FeatureKind::Binary {
        return Err(Error::WrongKind {
            expected: FeatureKind::Binary,
            found: ds.kind,
        });
    }
    for s in &mut ds.series {
        for t in 0..s.len() {
            if !s.any_observed(t) {
                continue;
            }
            for k in 0..s.n_features() {
                if !s.is_observed(t, k) {
                    s.set(t, k, Some(0.0));
                }
            }
        }
    }
    Ok(ds)
}

/// Subtracts a centered moving average from every observed cell.
///
/// The average at `t` runs over observed cells of the same feature within
/// `±(window-1)/2` steps, truncated at the series ends. The mask is unchanged.
pub fn detrend(ds: &TimeSeriesDataset, window: usize) -> Result<TimeSeriesDataset> {
    if ds.kind != FeatureKind::Continuous {
        return Err(Error::WrongKind {
            expected: FeatureKind::Continuous,
            found: ds.kind,
        });
    }
    if window < 3 || window % 2 == 0 {
        return Err(Error::param(format!(
            "detrend window must be odd and at least 3, got {window}"
        )));
    }
    let half = window / 2;
    let mut out = ds.clone();
    for (src, dst) in ds.series.iter().zip(out.series.iter_mut()) {
        let n = src.len();
        for k in 0..src.n_features() {
            // Prefix sums over observed cells keep this O(T) per feature.
            let mut csum = vec![0.0; n + 1];
            let mut ccount = vec![0usize; n + 1];
            for t in 0..n {
                let v = src.value(t, k);
                csum[t + 1] = csum[t] + v.unwrap_or(0.0);
                ccount[t + 1] = ccount[t] + usize::from(v.is_some());
            }
            for t in 0..n {
                let Some(v) = src.value(t, k) else { continue };
                let lo = t.saturating_sub(half);
                let hi = (t + half + 1).min(n);
                let cnt = ccount[hi] - ccount[lo];
                let mean = (csum[hi] - csum[lo]) / cnt as f64;
                dst.set(t, k, Some(v - mean));
            }
        }
    }
    Ok(out)
}

/// Keeps individuals who logged something on at least `min_fraction` of
/// their timesteps.
pub fn filter_active(ds: &TimeSeriesDataset, min_fraction: f64) -> Result<TimeSeriesDataset> {
    let keep: Vec<usize> = ds
        .series
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let logged = (0..s.len()).filter(|&t| s.any_observed(t)).count();
            logged as f64 >= min_fraction * s.len() as f64
        })
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ds.subset(&keep)
}
