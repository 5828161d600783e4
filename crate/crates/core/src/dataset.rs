//! Right-censored survival datasets: CSV ingestion, standardization,
//! event-time quantiles and k-fold splitting.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One individual: covariates, observed time, event indicator and optional group label.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub features: Vec<f64>,
    pub time: f64,
    /// `true` when the event was observed, `false` when censored.
    pub event: bool,
    pub group: Option<String>,
}

/// Per-feature location/scale pairs fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    /// Divisors. Constant columns carry 1.0.
    pub stds: Vec<f64>,
}

impl Standardization {
    /// Column means and N-1 standard deviations. Columns with zero spread get a unit divisor.
    pub fn fit(ds: &SurvivalDataset) -> Result<Self> {
        let n = ds.len();
        if n == 0 {
            return Err(Error::invalid("cannot standardize an empty dataset"));
        }
        let d = ds.dim();
        let mut means = vec![0.0; d];
        for r in &ds.records {
            for (m, x) in means.iter_mut().zip(&r.features) {
                *m += x;
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        let mut stds = vec![0.0; d];
        for r in &ds.records {
            for ((s, x), m) in stds.iter_mut().zip(&r.features).zip(&means) {
                *s += (x - m) * (x - m);
            }
        }
        for s in stds.iter_mut() {
            let sd = if n > 1 { (*s / (n - 1) as f64).sqrt() } else { 0.0 };
            *s = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
        }
        Ok(Self { means, stds })
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply(&self, ds: &SurvivalDataset) -> Result<SurvivalDataset> {
        if ds.dim() != self.means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.means.len(),
                found: ds.dim(),
            });
        }
        let records = ds
            .records
            .iter()
            .map(|r| SurvivalRecord {
                features: self.apply_row(&r.features),
                ..r.clone()
            })
            .collect();
        Ok(SurvivalDataset {
            records,
            feature_names: ds.feature_names.clone(),
            standardization: Some(self.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    pub records: Vec<SurvivalRecord>,
    pub feature_names: Vec<String>,
    /// Statistics already applied to `records`, if any.
    pub standardization: Option<Standardization>,
}

impl SurvivalDataset {
    /// Builds a dataset, checking that every record has `feature_names.len()` finite features
    /// and a finite non-negative time.
    pub fn new(records: Vec<SurvivalRecord>, feature_names: Vec<String>) -> Result<Self> {
        let d = feature_names.len();
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != d {
                return Err(Error::Load {
                    row: i + 1,
                    message: format!("expected {d} features, found {}", r.features.len()),
                });
            }
            if !(r.time.is_finite() && r.time >= 0.0) {
                return Err(Error::Load {
                    row: i + 1,
                    message: format!("time must be finite and non-negative, got {}", r.time),
                });
            }
            if r.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::Load {
                    row: i + 1,
                    message: "non-finite feature value".into(),
                });
            }
        }
        Ok(Self {
            records,
            feature_names,
            standardization: None,
        })
    }

    /// Convenience constructor from parallel columns; `features` is row-major N x d.
    pub fn from_columns(features: Vec<Vec<f64>>, times: &[f64], events: &[bool]) -> Result<Self> {
        if features.len() != times.len() || times.len() != events.len() {
            return Err(Error::invalid("features, times and events differ in length"));
        }
        let d = features.first().map_or(0, Vec::len);
        let names = (1..=d).map(|j| format!("x{j}")).collect();
        let records = features
            .into_iter()
            .zip(times.iter().zip(events))
            .map(|(features, (&time, &event))| SurvivalRecord {
                features,
                time,
                event,
                group: None,
            })
            .collect();
        Self::new(records, names)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.event).collect()
    }

    pub fn groups(&self) -> Vec<Option<String>> {
        self.records.iter().map(|r| r.group.clone()).collect()
    }

    pub fn n_events(&self) -> usize {
        self.records.iter().filter(|r| r.event).count()
    }

    /// N x d feature matrix.
    pub fn feature_matrix(&self) -> Array2<f64> {
        let d = self.dim();
        Array2::from_shape_fn((self.len(), d), |(i, j)| self.records[i].features[j])
    }

    /// Records at `indices`, in that order. Standardization metadata is carried over.
    pub fn subset(&self, indices: &[usize]) -> SurvivalDataset {
        SurvivalDataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Removes the named feature columns. Unknown names are an error.
    pub fn drop_features(&self, names: &[String]) -> Result<SurvivalDataset> {
        for n in names {
            if !self.feature_names.contains(n) {
                return Err(Error::invalid(format!("cannot drop unknown feature column '{n}'")));
            }
        }
        let keep: Vec<usize> = (0..self.dim())
            .filter(|&j| !names.contains(&self.feature_names[j]))
            .collect();
        let records = self
            .records
            .iter()
            .map(|r| SurvivalRecord {
                features: keep.iter().map(|&j| r.features[j]).collect(),
                ..r.clone()
            })
            .collect();
        Ok(SurvivalDataset {
            records,
            feature_names: keep.iter().map(|&j| self.feature_names[j].clone()).collect(),
            standardization: None,
        })
    }
}

/// How rows with a missing value are treated on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    Drop,
}

/// Column mapping for [`load_csv`]. Every column that is not the time or event
/// column and is not listed in `drop_columns` is a numeric feature. The group
/// column is read as a label and, unless dropped, also as a feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub time_col: String,
    pub event_col: String,
    pub group_col: Option<String>,
    pub drop_columns: Vec<String>,
    pub missing: MissingPolicy,
}

impl Default for Schema {
    fn default() -> Self {
        Self::new("time", "event")
    }
}

impl Schema {
    pub fn new(time_col: &str, event_col: &str) -> Self {
        Self {
            time_col: time_col.to_string(),
            event_col: event_col.to_string(),
            group_col: None,
            drop_columns: Vec::new(),
            missing: MissingPolicy::Reject,
        }
    }

    pub fn with_group(mut self, group_col: &str) -> Self {
        self.group_col = Some(group_col.to_string());
        self
    }
}

fn is_missing(s: &str) -> bool {
    matches!(s, "" | "NA" | "na" | "NaN" | "nan" | "null" | "NULL")
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<SurvivalDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

/// Parses CSV text with a header row. Records keep file order.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<SurvivalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("column '{name}' not found in header")))
    };
    let time_idx = find(&schema.time_col)?;
    let event_idx = find(&schema.event_col)?;
    let group_idx = schema.group_col.as_deref().map(find).transpose()?;
    for c in &schema.drop_columns {
        find(c)?;
    }
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&j| j != time_idx && j != event_idx && !schema.drop_columns.contains(&headers[j]))
        .collect();
    let feature_names = feature_idx.iter().map(|&j| headers[j].clone()).collect();

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let cell = |j: usize| row.get(j).unwrap_or("");
        let used = feature_idx.iter().chain([&time_idx, &event_idx]);
        let has_missing = used.clone().any(|&j| is_missing(cell(j)))
            || group_idx.is_some_and(|g| is_missing(cell(g)));
        if has_missing {
            match schema.missing {
                MissingPolicy::Drop => continue,
                MissingPolicy::Reject => {
                    return Err(Error::Load {
                        row: row_no,
                        message: "missing value (use the drop-missing policy to skip such rows)".into(),
                    })
                }
            }
        }
        let num = |j: usize| -> Result<f64> {
            cell(j).parse::<f64>().map_err(|_| Error::Load {
                row: row_no,
                message: format!("column '{}': '{}' is not numeric", headers[j], cell(j)),
            })
        };
        let time = num(time_idx)?;
        if !(time.is_finite() && time >= 0.0) {
            return Err(Error::Load {
                row: row_no,
                message: format!("time must be finite and non-negative, got {time}"),
            });
        }
        let event = match num(event_idx)? {
            0.0 => false,
            1.0 => true,
            v => {
                return Err(Error::Load {
                    row: row_no,
                    message: format!("event indicator must be 0 or 1, got {v}"),
                })
            }
        };
        let features = feature_idx.iter().map(|&j| num(j)).collect::<Result<Vec<_>>>()?;
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Load {
                row: row_no,
                message: "non-finite feature value".into(),
            });
        }
        records.push(SurvivalRecord {
            features,
            time,
            event,
            group: group_idx.map(|g| cell(g).to_string()),
        });
    }
    SurvivalDataset::new(records, feature_names)
}

/// Fits [`Standardization`] on `ds` and applies it. Uses the N-1 divisor; constant
/// columns become zeros.
pub fn standardize(ds: &SurvivalDataset) -> Result<(SurvivalDataset, Standardization)> {
    let stats = Standardization::fit(ds)?;
    Ok((stats.apply(ds)?, stats))
}

/// Lower nearest-rank quantile of a sorted slice: the element of rank `ceil(p * m)`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    let rank = (p * m as f64).ceil() as usize;
    sorted[rank.clamp(1, m) - 1]
}

/// Empirical quantiles of the uncensored event times (nearest-rank, no interpolation).
pub fn event_quantiles(ds: &SurvivalDataset, probs: &[f64]) -> Result<Vec<f64>> {
    event_time_quantiles(&ds.times(), &ds.events(), probs)
}

pub fn event_time_quantiles(times: &[f64], events: &[bool], probs: &[f64]) -> Result<Vec<f64>> {
    let mut ev: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .collect();
    if ev.is_empty() {
        return Err(Error::NoEvents("event quantile computation".into()));
    }
    ev.sort_by(f64::total_cmp);
    probs
        .iter()
        .map(|&p| {
            if p > 0.0 && p < 1.0 {
                Ok(nearest_rank(&ev, p))
            } else {
                Err(Error::invalid(format!("quantile probability {p} outside (0, 1)")))
            }
        })
        .collect()
}

/// Assignment of each record to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_assignments: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldSplit {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_assignments.len())
            .filter(|&i| self.fold_assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_assignments.len())
            .filter(|&i| self.fold_assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded random partition into `k` folds whose sizes differ by at most one.
pub fn k_fold_split(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::invalid(format!("cannot split {n} records into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_assignments = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold_assignments[i] = pos % k;
    }
    Ok(FoldSplit {
        fold_assignments,
        k,
        seed,
    })
}

/// Distinct group labels, sorted.
pub fn group_labels(ds: &SurvivalDataset) -> Vec<String> {
    let set: HashSet<&str> = ds.records.iter().filter_map(|r| r.group.as_deref()).collect();
    let mut v: Vec<String> = set.into_iter().map(str::to_string).collect();
    v.sort();
    v
}
