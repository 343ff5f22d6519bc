//! Multi-mode process time series: samples, CSV ingestion, mode segmentation
//! and transition-point extraction.
//!
//! Mode labels are arbitrary string tokens. At construction they are mapped to
//! dense [`ModeId`]s in order of first appearance (after the stable sort by
//! timestamp), so two datasets can assign different ids to the same label;
//! compare modes across datasets through [`TimeSeriesDataset::mode_label`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use nalgebra::DMatrix;
use thiserror::Error;

/// Default gap threshold for transition pairs (one day).
pub const DEFAULT_MAX_GAP_SECONDS: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: column `{0}` not found in header")]
    MissingColumn(String),
    #[error("schema error: column `{0}` is mapped more than once")]
    DuplicateColumn(String),
    #[error("schema error: no feature columns")]
    NoFeatures,
    #[error("parse error at row {row}, column `{column}`: cannot read `{value}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("invariant error at row {row}: target presence differs from earlier rows (mixed complete/incomplete data)")]
    MixedTargets { row: usize },
    #[error("invariant error at sample {index}: expected {expected} features, found {found}")]
    FeatureCount {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("invariant error at sample {index}: non-finite value")]
    NonFinite { index: usize },
    #[error("invariant error at sample {index}: mode id {mode} not in mode set")]
    UnknownModeId { index: usize, mode: usize },
    #[error("max gap must be positive, got {0}")]
    InvalidGap(f64),
}

/// Dense index into a dataset's mode table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModeId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub mode: ModeId,
    pub features: Vec<f64>,
    pub target: Option<f64>,
}

/// A sample described by its mode label, used to build datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub timestamp: f64,
    pub mode: String,
    pub features: Vec<f64>,
    pub target: Option<f64>,
}

impl Record {
    pub fn new(timestamp: f64, mode: &str, features: Vec<f64>, target: Option<f64>) -> Self {
        Self {
            timestamp,
            mode: mode.to_string(),
            features,
            target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    feature_names: Vec<String>,
    modes: Vec<String>,
    samples: Vec<Sample>,
}

impl TimeSeriesDataset {
    /// Builds a dataset from labelled records. Records are stable-sorted by
    /// timestamp; ties keep their input order.
    pub fn from_records<I>(feature_names: Vec<String>, records: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = Record>,
    {
        let mut records: Vec<Record> = records.into_iter().collect();
        records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let mut modes: Vec<String> = Vec::new();
        let mut samples = Vec::with_capacity(records.len());
        for r in records {
            let id = match modes.iter().position(|m| *m == r.mode) {
                Some(i) => i,
                None => {
                    modes.push(r.mode);
                    modes.len() - 1
                }
            };
            samples.push(Sample {
                timestamp: r.timestamp,
                mode: ModeId(id),
                features: r.features,
                target: r.target,
            });
        }
        Self::new(feature_names, modes, samples)
    }

    /// Builds a dataset from samples whose mode ids index `modes`.
    pub fn new(
        feature_names: Vec<String>,
        modes: Vec<String>,
        mut samples: Vec<Sample>,
    ) -> Result<Self, DatasetError> {
        let m = feature_names.len();
        for (index, s) in samples.iter().enumerate() {
            if s.features.len() != m {
                return Err(DatasetError::FeatureCount {
                    index,
                    expected: m,
                    found: s.features.len(),
                });
            }
            if s.mode.0 >= modes.len() {
                return Err(DatasetError::UnknownModeId {
                    index,
                    mode: s.mode.0,
                });
            }
            let finite = s.timestamp.is_finite()
                && s.features.iter().all(|v| v.is_finite())
                && s.target.is_none_or(f64::is_finite);
            if !finite {
                return Err(DatasetError::NonFinite { index });
            }
        }
        if let Some(first) = samples.first() {
            let complete = first.target.is_some();
            if let Some(pos) = samples.iter().position(|s| s.target.is_some() != complete) {
                return Err(DatasetError::MixedTargets { row: pos + 1 });
            }
        }
        samples.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Ok(Self {
            feature_names,
            modes,
            samples,
        })
    }

    pub fn empty(feature_names: Vec<String>) -> Self {
        Self {
            feature_names,
            modes: Vec::new(),
            samples: Vec::new(),
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// The mode table; `ModeId(i)` refers to `modes()[i]`.
    pub fn modes(&self) -> &[String] {
        &self.modes
    }

    pub fn mode_label(&self, id: ModeId) -> &str {
        &self.modes[id.0]
    }

    /// Label of the mode of sample `index`.
    pub fn sample_mode(&self, index: usize) -> &str {
        self.mode_label(self.samples[index].mode)
    }

    /// True when the dataset is non-empty and every sample carries a target.
    pub fn is_complete(&self) -> bool {
        self.samples.first().is_some_and(|s| s.target.is_some())
    }

    /// N×M feature matrix.
    pub fn feature_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.n_features(), |i, j| {
            self.samples[i].features[j]
        })
    }

    /// Targets when the dataset is complete.
    pub fn targets(&self) -> Option<Vec<f64>> {
        if !self.is_complete() {
            return None;
        }
        Some(self.samples.iter().map(|s| s.target.unwrap_or(f64::NAN)).collect())
    }

    pub fn records(&self) -> impl Iterator<Item = Record> + '_ {
        self.samples.iter().map(|s| Record {
            timestamp: s.timestamp,
            mode: self.modes[s.mode.0].clone(),
            features: s.features.clone(),
            target: s.target,
        })
    }

    /// Same samples with the target removed.
    pub fn without_targets(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.target = None;
        }
        out
    }

    /// Replaces every sample's features and target through `f`, keeping
    /// timestamps and modes.
    pub(crate) fn map_samples<F>(&self, mut f: F) -> Result<Self, DatasetError>
    where
        F: FnMut(&Sample) -> (Vec<f64>, Option<f64>),
    {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let (features, target) = f(s);
                Sample {
                    timestamp: s.timestamp,
                    mode: s.mode,
                    features,
                    target,
                }
            })
            .collect();
        Self::new(self.feature_names.clone(), self.modes.clone(), samples)
    }

    /// Concatenates datasets with identical feature names, re-sorting by time.
    pub fn concat<'a, I>(parts: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = &'a TimeSeriesDataset>,
    {
        let mut names: Option<Vec<String>> = None;
        let mut records = Vec::new();
        for part in parts {
            match &names {
                None => names = Some(part.feature_names.clone()),
                Some(n) if *n != part.feature_names => {
                    return Err(DatasetError::FeatureCount {
                        index: records.len(),
                        expected: n.len(),
                        found: part.n_features(),
                    })
                }
                Some(_) => {}
            }
            records.extend(part.records());
        }
        Self::from_records(names.unwrap_or_default(), records)
    }
}

/// Partitions a dataset by mode label. Each subset keeps the input order and
/// holds a single mode.
pub fn split_by_mode(ds: &TimeSeriesDataset) -> BTreeMap<String, TimeSeriesDataset> {
    let mut buckets: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in &ds.samples {
        let label = ds.mode_label(s.mode).to_string();
        buckets.entry(label).or_default().push(Sample {
            mode: ModeId(0),
            ..s.clone()
        });
    }
    buckets
        .into_iter()
        .map(|(label, samples)| {
            let subset = TimeSeriesDataset {
                feature_names: ds.feature_names.clone(),
                modes: vec![label.clone()],
                samples,
            };
            (label, subset)
        })
        .collect()
}

/// Two temporally adjacent samples straddling a mode switch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionPair {
    /// Last sample of the outgoing mode.
    pub from_index: usize,
    /// First sample of the incoming mode.
    pub to_index: usize,
    pub from_mode: ModeId,
    pub to_mode: ModeId,
    pub gap_seconds: f64,
}

/// Every adjacent mode switch whose time gap is at most `max_gap_seconds`,
/// in timestamp order. `f64::INFINITY` keeps all switches.
pub fn extract_transitions(
    ds: &TimeSeriesDataset,
    max_gap_seconds: f64,
) -> Result<Vec<TransitionPair>, DatasetError> {
    if !(max_gap_seconds > 0.0) {
        return Err(DatasetError::InvalidGap(max_gap_seconds));
    }
    Ok(ds
        .samples
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0].mode != w[1].mode)
        .map(|(i, w)| TransitionPair {
            from_index: i,
            to_index: i + 1,
            from_mode: w[0].mode,
            to_mode: w[1].mode,
            gap_seconds: w[1].timestamp - w[0].timestamp,
        })
        .filter(|p| p.gap_seconds <= max_gap_seconds)
        .collect())
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub timestamp: String,
    pub mode: String,
    /// Feature columns in order. Empty means every column not otherwise mapped.
    pub features: Vec<String>,
    /// Target column. The target is optional by nature: when the named column
    /// is absent from the header the dataset is read as incomplete.
    pub target: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            mode: "mode".into(),
            features: Vec::new(),
            target: Some("y".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TimeFormat {
    Epoch,
    Iso,
}

fn parse_iso(s: &str) -> Option<f64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp() as f64 + f64::from(dt.timestamp_subsec_nanos()) * 1e-9);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            let utc = dt.and_utc();
            return Some(utc.timestamp() as f64 + f64::from(utc.timestamp_subsec_nanos()) * 1e-9);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp() as f64)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TimeSeriesDataset, DatasetError> {
    read_csv(File::open(path)?, schema)
}

/// Reads a dataset from CSV. Row numbers in errors count data rows from 1.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<TimeSeriesDataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let ts_col = find(&schema.timestamp)?;
    let mode_col = find(&schema.mode)?;
    let target_col = schema.target.as_deref().and_then(|t| header.iter().position(|h| h == t));
    let feature_cols: Vec<usize> = if schema.features.is_empty() {
        (0..header.len())
            .filter(|&i| i != ts_col && i != mode_col && Some(i) != target_col)
            .collect()
    } else {
        schema.features.iter().map(|f| find(f)).collect::<Result<_, _>>()?
    };
    if feature_cols.is_empty() {
        return Err(DatasetError::NoFeatures);
    }
    let mut mapped: Vec<usize> = feature_cols.clone();
    mapped.extend([ts_col, mode_col]);
    mapped.extend(target_col);
    mapped.sort_unstable();
    if let Some(w) = mapped.windows(2).find(|w| w[0] == w[1]) {
        return Err(DatasetError::DuplicateColumn(header[w[0]].clone()));
    }
    let feature_names: Vec<String> = feature_cols.iter().map(|&i| header[i].clone()).collect();

    let parse_num = |row: usize, col: usize, cell: &str| -> Result<f64, DatasetError> {
        cell.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| DatasetError::Parse {
                row,
                column: header[col].clone(),
                value: cell.to_string(),
            })
    };

    let mut time_format = None;
    let mut complete: Option<bool> = None;
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let ts_cell = cell(ts_col).trim();
        let format = *time_format.get_or_insert(if ts_cell.parse::<f64>().is_ok() {
            TimeFormat::Epoch
        } else {
            TimeFormat::Iso
        });
        let timestamp = match format {
            TimeFormat::Epoch => parse_num(row, ts_col, ts_cell)?,
            TimeFormat::Iso => parse_iso(ts_cell).ok_or_else(|| DatasetError::Parse {
                row,
                column: header[ts_col].clone(),
                value: ts_cell.to_string(),
            })?,
        };
        let features = feature_cols
            .iter()
            .map(|&c| parse_num(row, c, cell(c)))
            .collect::<Result<Vec<_>, _>>()?;
        let target = match target_col {
            Some(c) if !cell(c).trim().is_empty() => Some(parse_num(row, c, cell(c))?),
            _ => None,
        };
        let present = target.is_some();
        if *complete.get_or_insert(present) != present {
            return Err(DatasetError::MixedTargets { row });
        }
        records.push(Record {
            timestamp,
            mode: cell(mode_col).trim().to_string(),
            features,
            target,
        });
    }
    TimeSeriesDataset::from_records(feature_names, records)
}

pub fn save_csv(ds: &TimeSeriesDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_csv(ds, File::create(path)?)
}

/// Writes `timestamp,mode,<features>[,y]`. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(ds: &TimeSeriesDataset, writer: W) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(writer);
    let complete = ds.is_complete();
    let mut header = vec!["timestamp".to_string(), "mode".to_string()];
    header.extend(ds.feature_names.iter().cloned());
    if complete {
        header.push("y".into());
    }
    w.write_record(&header)?;
    for s in &ds.samples {
        let mut row = vec![s.timestamp.to_string(), ds.mode_label(s.mode).to_string()];
        row.extend(s.features.iter().map(f64::to_string));
        if let Some(t) = s.target {
            row.push(t.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
