//! Training-fit metrics (r², RMSE per mode), transition jumps (Δŷ) on
//! incomplete data, and report writers.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{extract_transitions, DatasetError, TimeSeriesDataset, DEFAULT_MAX_GAP_SECONDS};
use crate::model::{predict, ModelError, ModelKind, PcrModel, Prediction, Provenance};

pub const REPORT_FORMAT: &str = "cpcr-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} observed vs {1} predicted")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("observed values have zero variance")]
    ZeroVariance,
    #[error("dataset `{0}` has no transition pairs within the gap limit")]
    NoPairs(String),
    #[error("dataset for mode `{0}` has no targets")]
    MissingTargets(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

fn check_lengths(y: &[f64], y_hat: &[f64]) -> Result<(), EvalError> {
    if y.len() != y_hat.len() {
        return Err(EvalError::LengthMismatch(y.len(), y_hat.len()));
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// `1 − SS_res / SS_tot`.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64, EvalError> {
    check_lengths(y, y_hat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if !(ss_tot > 0.0) {
        return Err(EvalError::ZeroVariance);
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64, EvalError> {
    check_lengths(y, y_hat)?;
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Mean |ŷ_from − ŷ_to| over transition pairs, and the pair count, from
/// normalized predictions already computed for `ds`.
pub fn delta_y_from_predictions(
    ds: &TimeSeriesDataset,
    y_hat: &[f64],
    max_gap_seconds: f64,
) -> Result<(f64, usize), EvalError> {
    if ds.len() != y_hat.len() {
        return Err(EvalError::LengthMismatch(ds.len(), y_hat.len()));
    }
    let pairs = extract_transitions(ds, max_gap_seconds)?;
    if pairs.is_empty() {
        return Err(EvalError::NoPairs(String::new()));
    }
    let total: f64 = pairs
        .iter()
        .map(|p| (y_hat[p.from_index] - y_hat[p.to_index]).abs())
        .sum();
    Ok((total / pairs.len() as f64, pairs.len()))
}

/// Mean absolute jump of the model's normalized predictions across the
/// mode switches of `incomplete`.
pub fn delta_y(
    model: &PcrModel,
    incomplete: &TimeSeriesDataset,
    max_gap_seconds: f64,
) -> Result<(f64, usize), EvalError> {
    let y_hat: Vec<f64> = predict(model, incomplete)?.iter().map(|p| p.y_hat_norm).collect();
    delta_y_from_predictions(incomplete, &y_hat, max_gap_seconds)
}

/// Adjacent-step statistics of a prediction series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub median_step: f64,
    pub max_step: f64,
    /// Largest step across a mode switch (0 when there is none).
    pub max_switch_step: f64,
}

impl StepStats {
    pub fn max_switch_ratio(&self) -> f64 {
        self.max_switch_step / self.median_step
    }

    pub fn max_ratio(&self) -> f64 {
        self.max_step / self.median_step
    }
}

/// `|ŷ_{n+1} − ŷ_n|` over all consecutive samples; the median uses the
/// mean of the two middle values for even counts.
pub fn step_stats(ds: &TimeSeriesDataset, y_hat: &[f64]) -> Result<StepStats, EvalError> {
    if ds.len() != y_hat.len() {
        return Err(EvalError::LengthMismatch(ds.len(), y_hat.len()));
    }
    if ds.len() < 2 {
        return Err(EvalError::Empty);
    }
    let mut steps: Vec<f64> = y_hat.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let max_switch_step = (0..steps.len())
        .filter(|&i| ds.sample_mode(i) != ds.sample_mode(i + 1))
        .map(|i| steps[i])
        .fold(0.0, f64::max);
    let max_step = steps.iter().copied().fold(0.0, f64::max);
    steps.sort_by(f64::total_cmp);
    let n = steps.len();
    let median_step = if n % 2 == 1 {
        steps[n / 2]
    } else {
        0.5 * (steps[n / 2 - 1] + steps[n / 2])
    };
    Ok(StepStats {
        median_step,
        max_step,
        max_switch_step,
    })
}

/// Sum of squared normalized residuals over all complete data.
pub fn training_rss(model: &PcrModel, complete: &BTreeMap<String, TimeSeriesDataset>) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for (mode, ds) in complete {
        let (y, y_hat) = normalized_fit(model, mode, ds)?;
        total += y.iter().zip(&y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total)
}

/// Observed and predicted normalized targets of one complete dataset.
fn normalized_fit(model: &PcrModel, mode: &str, ds: &TimeSeriesDataset) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let targets = ds.targets().ok_or_else(|| EvalError::MissingTargets(mode.to_string()))?;
    let preds = predict(model, ds)?;
    let mut y = Vec::with_capacity(targets.len());
    for (i, t) in targets.iter().enumerate() {
        let norm = &model.mode_model(ds.sample_mode(i))?.preprocessing.normalizer;
        y.push(norm.normalize_target(*t).ok_or_else(|| EvalError::MissingTargets(mode.to_string()))?);
    }
    Ok((y, preds.iter().map(|p| p.y_hat_norm).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_gap_seconds: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_gap_seconds: DEFAULT_MAX_GAP_SECONDS,
        }
    }
}

/// Metrics of one model. r² and RMSE are training-fit values in normalized
/// target units; `rmse_raw` is in target units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: String,
    pub model_kind: ModelKind,
    pub constrained_on: Option<String>,
    pub per_mode_r2: BTreeMap<String, f64>,
    pub per_mode_rmse: BTreeMap<String, f64>,
    pub per_mode_rmse_raw: BTreeMap<String, f64>,
    /// Held-out datasets only.
    pub delta_y: BTreeMap<String, f64>,
    pub pair_count: BTreeMap<String, usize>,
}

/// Test I on every complete dataset and Test II on every incomplete dataset
/// except the one a model was constrained on.
pub fn run_test_suite(
    models: &[(String, PcrModel)],
    complete: &BTreeMap<String, TimeSeriesDataset>,
    incompletes: &BTreeMap<String, TimeSeriesDataset>,
    cfg: &EvalConfig,
) -> Result<Vec<EvaluationReport>, EvalError> {
    models
        .iter()
        .map(|(name, model)| {
            let mut per_mode_r2 = BTreeMap::new();
            let mut per_mode_rmse = BTreeMap::new();
            let mut per_mode_rmse_raw = BTreeMap::new();
            for (mode, ds) in complete {
                let (y, y_hat) = normalized_fit(model, mode, ds)?;
                per_mode_r2.insert(mode.clone(), r_squared(&y, &y_hat)?);
                per_mode_rmse.insert(mode.clone(), rmse(&y, &y_hat)?);
                let raw_y = ds.targets().unwrap_or_default();
                let raw_hat: Option<Vec<f64>> = predict(model, ds)?.iter().map(|p| p.y_hat_raw).collect();
                if let Some(raw_hat) = raw_hat {
                    per_mode_rmse_raw.insert(mode.clone(), rmse(&raw_y, &raw_hat)?);
                }
            }
            let mut delta = BTreeMap::new();
            let mut pair_count = BTreeMap::new();
            for (id, ds) in incompletes {
                if model.constraint_dataset() == Some(id.as_str()) {
                    continue;
                }
                let (d, n) = delta_y(model, ds, cfg.max_gap_seconds).map_err(|e| match e {
                    EvalError::NoPairs(_) => EvalError::NoPairs(id.clone()),
                    other => other,
                })?;
                delta.insert(id.clone(), d);
                pair_count.insert(id.clone(), n);
            }
            Ok(EvaluationReport {
                model: name.clone(),
                model_kind: model.kind,
                constrained_on: model.constraint_dataset().map(str::to_string),
                per_mode_r2,
                per_mode_rmse,
                per_mode_rmse_raw,
                delta_y: delta,
                pair_count,
            })
        })
        .collect()
}

/// Top-level report document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub format: String,
    pub version: u32,
    /// Omitted unless configured, so reruns are byte-identical.
    pub evaluated_at: Option<String>,
    pub max_gap_seconds: f64,
    pub models: Vec<EvaluationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ReportDocument {
    pub fn new(models: Vec<EvaluationReport>, cfg: &EvalConfig) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            evaluated_at: None,
            max_gap_seconds: cfg.max_gap_seconds,
            models,
            provenance: None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// One `model,kind,metric,key,value` row per number.
pub fn write_flat_csv<W: Write>(reports: &[EvaluationReport], writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "kind", "metric", "key", "value"])?;
    for r in reports {
        let kind = r.model_kind.label();
        let groups: [(&str, Vec<(&String, String)>); 5] = [
            ("r2_training_fit", r.per_mode_r2.iter().map(|(k, v)| (k, v.to_string())).collect()),
            ("rmse_training_fit", r.per_mode_rmse.iter().map(|(k, v)| (k, v.to_string())).collect()),
            ("rmse_raw_training_fit", r.per_mode_rmse_raw.iter().map(|(k, v)| (k, v.to_string())).collect()),
            ("delta_y", r.delta_y.iter().map(|(k, v)| (k, v.to_string())).collect()),
            ("pair_count", r.pair_count.iter().map(|(k, v)| (k, v.to_string())).collect()),
        ];
        for (metric, values) in groups {
            for (key, value) in values {
                w.write_record([r.model.as_str(), kind, metric, key.as_str(), value.as_str()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Model-by-metric table: r² and RMSE per mode, then Δŷ per incomplete
/// dataset; the constrained dataset's cell is left blank.
pub fn write_comparison_csv<W: Write>(reports: &[EvaluationReport], writer: W) -> Result<(), EvalError> {
    let modes: BTreeSet<&String> = reports.iter().flat_map(|r| r.per_mode_r2.keys()).collect();
    let ids: BTreeSet<&String> = reports
        .iter()
        .flat_map(|r| r.delta_y.keys().chain(r.constrained_on.iter()))
        .collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["model".to_string(), "kind".to_string()];
    header.extend(modes.iter().map(|m| format!("r2_training_fit_{m}")));
    header.extend(modes.iter().map(|m| format!("rmse_training_fit_{m}")));
    header.extend(ids.iter().map(|i| format!("delta_y_{i}")));
    w.write_record(&header)?;
    let cell = |v: Option<&f64>| v.map(f64::to_string).unwrap_or_default();
    for r in reports {
        let mut row = vec![r.model.clone(), r.model_kind.label().to_string()];
        row.extend(modes.iter().map(|m| cell(r.per_mode_r2.get(*m))));
        row.extend(modes.iter().map(|m| cell(r.per_mode_rmse.get(*m))));
        row.extend(ids.iter().map(|i| cell(r.delta_y.get(*i))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready `timestamp,mode,y_hat_norm,y_hat_raw` rows.
pub fn write_predictions_csv<W: Write>(preds: &[Prediction], writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp", "mode", "y_hat_norm", "y_hat_raw"])?;
    for p in preds {
        w.write_record([
            p.timestamp.to_string(),
            p.mode.clone(),
            p.y_hat_norm.to_string(),
            p.y_hat_raw.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;

    fn ds(modes: &[&str], times: &[f64]) -> TimeSeriesDataset {
        let recs = modes
            .iter()
            .zip(times)
            .map(|(m, t)| Record::new(*t, m, vec![0.0], None))
            .collect::<Vec<_>>();
        TimeSeriesDataset::from_records(vec!["x".into()], recs).unwrap()
    }

    #[test]
    fn r_squared_cases() {
        let y = [0.0, 1.0, 2.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert_eq!(r_squared(&y, &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(r_squared(&y, &[0.0, 1.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(r_squared(&[1.0, 1.0], &[1.0, 2.0]), Err(EvalError::ZeroVariance)));
        assert!(matches!(r_squared(&y, &[1.0]), Err(EvalError::LengthMismatch(3, 1))));
        assert!(matches!(r_squared(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5_f64.sqrt());
        let base = rmse(&[0.0, 0.0, 0.0], &[1.0, -2.0, 0.5]).unwrap();
        let scaled = rmse(&[0.0, 0.0, 0.0], &[-3.0, 6.0, -1.5]).unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn delta_y_from_predictions_cases() {
        let d = ds(&["a", "a", "b", "b", "a"], &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let (v, n) = delta_y_from_predictions(&d, &[0.0, 1.0, 3.0, 3.0, 2.5], 10.0).unwrap();
        assert_eq!(n, 2);
        assert_eq!(v, (2.0 + 0.5) / 2.0);
        let flat = ds(&["a", "a"], &[0.0, 1.0]);
        assert!(matches!(delta_y_from_predictions(&flat, &[0.0, 1.0], 10.0), Err(EvalError::NoPairs(_))));
        let gapped = ds(&["a", "b"], &[0.0, 100.0]);
        assert!(matches!(delta_y_from_predictions(&gapped, &[0.0, 1.0], 10.0), Err(EvalError::NoPairs(_))));
    }

    #[test]
    fn step_stats_cases() {
        let d = ds(&["a", "a", "b", "b", "b"], &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let s = step_stats(&d, &[0.0, 0.1, 1.1, 1.3, 1.6]).unwrap();
        assert!((s.max_switch_step - 1.0).abs() < 1e-12);
        assert!((s.max_step - 1.0).abs() < 1e-12);
        assert!((s.median_step - 0.25).abs() < 1e-12);
    }

    #[test]
    fn comparison_csv_blanks_constrained_dataset() {
        let mk = |name: &str, kind, on: Option<&str>, dy: &[(&str, f64)]| EvaluationReport {
            model: name.into(),
            model_kind: kind,
            constrained_on: on.map(str::to_string),
            per_mode_r2: [("m1".to_string(), 0.9)].into(),
            per_mode_rmse: [("m1".to_string(), 0.3)].into(),
            per_mode_rmse_raw: BTreeMap::new(),
            delta_y: dy.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            pair_count: dy.iter().map(|(k, _)| (k.to_string(), 3)).collect(),
        };
        let reports = vec![
            mk("mpcr", ModelKind::Mpcr, None, &[("c1", 0.5), ("c2", 0.7)]),
            mk("cpcr", ModelKind::Cpcr, Some("c1"), &[("c2", 0.2)]),
        ];
        let mut buf = Vec::new();
        write_comparison_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "model,kind,r2_training_fit_m1,rmse_training_fit_m1,delta_y_c1,delta_y_c2");
        assert_eq!(lines[1], "mpcr,MPCR,0.9,0.3,0.5,0.7");
        assert_eq!(lines[2], "cpcr,CPCR,0.9,0.3,,0.2");

        let mut flat = Vec::new();
        write_flat_csv(&reports, &mut flat).unwrap();
        let text = String::from_utf8(flat).unwrap();
        assert!(text.contains("cpcr,CPCR,delta_y,c2,0.2"));
        assert!(!text.contains("cpcr,CPCR,delta_y,c1"));
    }
}
