//! MPCR, SPCR and CPCR soft-sensor models: training, prediction and JSON
//! persistence.
//!
//! Features and target are standardized and features projected per mode,
//! using that mode's complete data. Regressions have no intercept and
//! constraints compare normalized predictions.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    extract_transitions, DatasetError, TimeSeriesDataset, TransitionPair, DEFAULT_MAX_GAP_SECONDS,
};
use crate::preprocess::{apply_normalizer, fit_normalizer, fit_pca, Normalizer, PcaModel, PreprocessError};
use crate::qp::{self, QpBlock, QpError, QpProblem, QpStatus, RidgePolicy};

pub const MODEL_FORMAT: &str = "cpcr-model";
pub const MODEL_VERSION: u32 = 1;
/// Key of the single entry of an SPCR model.
pub const POOLED_MODE: &str = "pooled";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no complete training data")]
    NoCompleteData,
    #[error("training data for mode `{0}` has missing targets")]
    MissingTargets(String),
    #[error("dataset for mode `{key}` contains samples labeled `{found}`")]
    ModeLabelMismatch { key: String, found: String },
    #[error("feature mismatch: model expects {expected:?}, data has {found:?}")]
    FeatureMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("mode `{0}` is not known to the model")]
    UnknownMode(String),
    #[error("constraint dataset `{0}` must not carry targets")]
    ConstraintTargets(String),
    #[error("constraints from dataset `{0}` are infeasible")]
    Infeasible(String),
    #[error("solver hit the iteration limit ({iterations}) on constraint dataset `{dataset}`")]
    IterationLimit { dataset: String, iterations: usize },
    #[error("model file error: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mpcr,
    Spcr,
    Cpcr,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Mpcr => "MPCR",
            ModelKind::Spcr => "SPCR",
            ModelKind::Cpcr => "CPCR",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mpcr" => Ok(ModelKind::Mpcr),
            "spcr" => Ok(ModelKind::Spcr),
            "cpcr" => Ok(ModelKind::Cpcr),
            other => Err(format!("unknown model kind `{other}` (expected mpcr, spcr or cpcr)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub coverage_threshold: f64,
    pub c: f64,
    pub max_gap_seconds: f64,
    pub qp_tol: f64,
    pub ridge: RidgePolicy,
    /// Defaults to `10·(rows + 1)` for the constraint rows in use.
    pub max_iter: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            coverage_threshold: 0.8,
            c: 0.0,
            max_gap_seconds: DEFAULT_MAX_GAP_SECONDS,
            qp_tol: qp::DEFAULT_TOL,
            ridge: RidgePolicy::Auto,
            max_iter: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return bad(format!("coverage_threshold must be in (0, 1], got {}", self.coverage_threshold));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return bad(format!("c must be finite and non-negative, got {}", self.c));
        }
        if !(self.max_gap_seconds > 0.0) {
            return bad(format!("max_gap_seconds must be positive, got {}", self.max_gap_seconds));
        }
        if !(self.qp_tol > 0.0 && self.qp_tol.is_finite()) {
            return bad(format!("qp_tol must be positive, got {}", self.qp_tol));
        }
        if let RidgePolicy::Fixed(r) = self.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return bad(format!("ridge must be non-negative, got {r}"));
            }
        }
        if self.max_iter == Some(0) {
            return bad("max_iter must be at least 1".into());
        }
        Ok(())
    }
}

/// Normalizer and PCA of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModePreprocessing {
    pub normalizer: Normalizer,
    pub pca: PcaModel,
}

impl ModePreprocessing {
    /// Principal-component scores of a raw feature vector.
    pub fn scores(&self, features: &[f64]) -> Result<Vec<f64>, PreprocessError> {
        self.pca.transform(&self.normalizer.normalize_features(features)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeModel {
    #[serde(flatten)]
    pub preprocessing: ModePreprocessing,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintBuildReport {
    pub pairs_found: usize,
    pub pairs_used: usize,
    pub pairs_dropped_gap: usize,
    /// Two per used pair, before deduplication.
    pub constraint_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintMeta {
    pub dataset_id: String,
    pub c: f64,
    pub max_gap_seconds: f64,
    pub report: ConstraintBuildReport,
    pub solver_status: QpStatus,
    pub solver_iterations: usize,
    pub active_constraints: Vec<usize>,
    /// Training objective at the solution (normalized units).
    pub objective_value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub role: String,
    pub file: String,
    pub sha256: String,
}

/// Where a model or report came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub run_config: serde_json::Value,
    pub inputs: Vec<InputFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcrModel {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub feature_names: Vec<String>,
    /// Per-mode models; SPCR has the single key [`POOLED_MODE`].
    pub modes: BTreeMap<String, ModeModel>,
    pub ridge: f64,
    pub constraint_meta: Option<ConstraintMeta>,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// One predicted sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub timestamp: f64,
    pub mode: String,
    pub y_hat_norm: f64,
    pub y_hat_raw: Option<f64>,
}

/// Constraint rows built from an incomplete dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub pairs: Vec<TransitionPair>,
    pub report: ConstraintBuildReport,
}

struct Prepared {
    feature_names: Vec<String>,
    preprocessing: BTreeMap<String, ModePreprocessing>,
    blocks: Vec<QpBlock>,
    ridge: f64,
}

fn check_complete(complete: &BTreeMap<String, TimeSeriesDataset>) -> Result<Vec<String>, ModelError> {
    let mut names: Option<&[String]> = None;
    if complete.is_empty() {
        return Err(ModelError::NoCompleteData);
    }
    for (key, ds) in complete {
        if !ds.is_complete() {
            return Err(ModelError::MissingTargets(key.clone()));
        }
        if let Some(other) = ds.modes().iter().find(|m| *m != key) {
            if ds.samples().iter().any(|s| ds.mode_label(s.mode) == other) {
                return Err(ModelError::ModeLabelMismatch {
                    key: key.clone(),
                    found: other.clone(),
                });
            }
        }
        match names {
            None => names = Some(ds.feature_names()),
            Some(n) if n != ds.feature_names() => {
                return Err(ModelError::FeatureMismatch {
                    expected: n.to_vec(),
                    found: ds.feature_names().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    Ok(names.unwrap_or_default().to_vec())
}

fn prepare_mode(ds: &TimeSeriesDataset, coverage: f64) -> Result<(ModePreprocessing, QpBlock), ModelError> {
    let normalizer = fit_normalizer(ds)?;
    let z = apply_normalizer(&normalizer, ds)?;
    let pca = fit_pca(&z, coverage)?;
    let design = pca.transform_matrix(&z.feature_matrix())?;
    let response = DVector::from_vec(z.targets().unwrap_or_default());
    let block = QpBlock::new(design, response)?;
    Ok((ModePreprocessing { normalizer, pca }, block))
}

fn prepare(
    complete: &BTreeMap<String, TimeSeriesDataset>,
    cfg: &TrainConfig,
    pooled: bool,
) -> Result<Prepared, ModelError> {
    cfg.validate()?;
    let feature_names = check_complete(complete)?;
    let mut preprocessing = BTreeMap::new();
    let mut blocks = Vec::new();
    if pooled {
        let all = TimeSeriesDataset::concat(complete.values())?;
        let (pre, block) = prepare_mode(&all, cfg.coverage_threshold)?;
        preprocessing.insert(POOLED_MODE.to_string(), pre);
        blocks.push(block);
    } else {
        for (key, ds) in complete {
            let (pre, block) = prepare_mode(ds, cfg.coverage_threshold)?;
            preprocessing.insert(key.clone(), pre);
            blocks.push(block);
        }
    }
    let ridge = qp::resolve_ridge(&blocks, cfg.ridge);
    Ok(Prepared {
        feature_names,
        preprocessing,
        blocks,
        ridge,
    })
}

fn assemble(
    kind: ModelKind,
    prepared: Prepared,
    coefficients: &DVector<f64>,
    constraint_meta: Option<ConstraintMeta>,
    cfg: &TrainConfig,
) -> PcrModel {
    let mut offset = 0;
    let modes = prepared
        .preprocessing
        .into_iter()
        .map(|(key, preprocessing)| {
            let k = preprocessing.pca.n_components();
            let w = coefficients.rows(offset, k).iter().copied().collect();
            offset += k;
            (
                key,
                ModeModel {
                    preprocessing,
                    coefficients: w,
                },
            )
        })
        .collect();
    PcrModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        kind,
        feature_names: prepared.feature_names,
        modes,
        ridge: prepared.ridge,
        constraint_meta,
        config: cfg.clone(),
        provenance: None,
    }
}

/// One independent principal-component regression per mode.
pub fn train_mpcr(complete: &BTreeMap<String, TimeSeriesDataset>, cfg: &TrainConfig) -> Result<PcrModel, ModelError> {
    let prepared = prepare(complete, cfg, false)?;
    let w = qp::solve_unconstrained(&prepared.blocks, prepared.ridge)?;
    Ok(assemble(ModelKind::Mpcr, prepared, &w, None, cfg))
}

/// A single regression on all complete data, ignoring modes.
pub fn train_spcr(complete: &BTreeMap<String, TimeSeriesDataset>, cfg: &TrainConfig) -> Result<PcrModel, ModelError> {
    let prepared = prepare(complete, cfg, true)?;
    let w = qp::solve_unconstrained(&prepared.blocks, prepared.ridge)?;
    Ok(assemble(ModelKind::Spcr, prepared, &w, None, cfg))
}

/// Two rows per transition pair `(i, j)`: `ŷ_i − ŷ_j + c ≥ 0` and
/// `ŷ_j − ŷ_i + c ≥ 0`, each sample scored with its own mode's
/// preprocessing. Columns follow the key order of `preprocessing`.
pub fn build_constraints(
    preprocessing: &BTreeMap<String, ModePreprocessing>,
    incomplete: &TimeSeriesDataset,
    c: f64,
    max_gap_seconds: f64,
) -> Result<ConstraintSet, ModelError> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(ModelError::InvalidConfig(format!("c must be finite and non-negative, got {c}")));
    }
    let all = extract_transitions(incomplete, f64::INFINITY)?;
    let pairs: Vec<TransitionPair> = all
        .iter()
        .filter(|p| p.gap_seconds <= max_gap_seconds)
        .cloned()
        .collect();

    let mut offsets = BTreeMap::new();
    let mut total = 0;
    for (key, pre) in preprocessing {
        offsets.insert(key.as_str(), total);
        total += pre.pca.n_components();
    }

    let mut matrix = DMatrix::zeros(2 * pairs.len(), total);
    for (r, pair) in pairs.iter().enumerate() {
        for (index, sign) in [(pair.from_index, 1.0), (pair.to_index, -1.0)] {
            let mode = incomplete.sample_mode(index);
            let pre = preprocessing
                .get(mode)
                .ok_or_else(|| ModelError::UnknownMode(mode.to_string()))?;
            let t = pre.scores(&incomplete.samples()[index].features)?;
            let o = offsets[mode];
            for (k, v) in t.iter().enumerate() {
                matrix[(2 * r, o + k)] += sign * v;
                matrix[(2 * r + 1, o + k)] -= sign * v;
            }
        }
    }
    let report = ConstraintBuildReport {
        pairs_found: all.len(),
        pairs_used: pairs.len(),
        pairs_dropped_gap: all.len() - pairs.len(),
        constraint_rows: 2 * pairs.len(),
    };
    Ok(ConstraintSet {
        offset: DVector::from_element(2 * pairs.len(), c),
        matrix,
        pairs,
        report,
    })
}

fn setup_cpcr(
    complete: &BTreeMap<String, TimeSeriesDataset>,
    incomplete_id: &str,
    incomplete: &TimeSeriesDataset,
    cfg: &TrainConfig,
) -> Result<(Prepared, QpProblem, ConstraintSet), ModelError> {
    let prepared = prepare(complete, cfg, false)?;
    if incomplete.samples().iter().any(|s| s.target.is_some()) {
        return Err(ModelError::ConstraintTargets(incomplete_id.to_string()));
    }
    if incomplete.n_features() != prepared.feature_names.len()
        || (!incomplete.is_empty() && incomplete.feature_names() != prepared.feature_names.as_slice())
    {
        return Err(ModelError::FeatureMismatch {
            expected: prepared.feature_names.clone(),
            found: incomplete.feature_names().to_vec(),
        });
    }
    let cons = build_constraints(&prepared.preprocessing, incomplete, cfg.c, cfg.max_gap_seconds)?;
    let problem = QpProblem::new(prepared.blocks.clone(), cons.matrix.clone(), cons.offset.clone(), prepared.ridge)?;
    Ok((prepared, problem, cons))
}

/// The constrained least-squares problem [`train_cpcr`] solves, with blocks
/// in mode-key order.
pub fn cpcr_problem(
    complete: &BTreeMap<String, TimeSeriesDataset>,
    incomplete_id: &str,
    incomplete: &TimeSeriesDataset,
    cfg: &TrainConfig,
) -> Result<(QpProblem, ConstraintSet), ModelError> {
    let (_, problem, cons) = setup_cpcr(complete, incomplete_id, incomplete, cfg)?;
    Ok((problem, cons))
}

/// Per-mode regressions solved jointly under transition constraints from
/// the incomplete dataset `incomplete_id`.
pub fn train_cpcr(
    complete: &BTreeMap<String, TimeSeriesDataset>,
    incomplete_id: &str,
    incomplete: &TimeSeriesDataset,
    cfg: &TrainConfig,
) -> Result<PcrModel, ModelError> {
    let (prepared, problem, cons) = setup_cpcr(complete, incomplete_id, incomplete, cfg)?;
    let max_iter = cfg
        .max_iter
        .unwrap_or_else(|| qp::default_max_iter(problem.n_constraints()));
    let sol = qp::solve(&problem, cfg.qp_tol, max_iter)?;
    match sol.status {
        QpStatus::Converged => {}
        QpStatus::Infeasible => return Err(ModelError::Infeasible(incomplete_id.to_string())),
        QpStatus::IterationLimit => {
            return Err(ModelError::IterationLimit {
                dataset: incomplete_id.to_string(),
                iterations: sol.iterations,
            })
        }
    }
    let meta = ConstraintMeta {
        dataset_id: incomplete_id.to_string(),
        c: cfg.c,
        max_gap_seconds: cfg.max_gap_seconds,
        report: cons.report,
        solver_status: sol.status,
        solver_iterations: sol.iterations,
        active_constraints: sol.active_set.clone(),
        objective_value: sol.objective_value,
    };
    Ok(assemble(ModelKind::Cpcr, prepared, &sol.coefficients, Some(meta), cfg))
}

impl PcrModel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Entry used for samples of `mode`.
    pub fn mode_model(&self, mode: &str) -> Result<&ModeModel, ModelError> {
        let key = if self.kind == ModelKind::Spcr { POOLED_MODE } else { mode };
        self.modes
            .get(key)
            .ok_or_else(|| ModelError::UnknownMode(mode.to_string()))
    }

    /// Normalized prediction for one raw feature vector.
    pub fn predict_one(&self, mode: &str, features: &[f64]) -> Result<f64, ModelError> {
        let m = self.mode_model(mode)?;
        let t = m.preprocessing.scores(features)?;
        Ok(t.iter().zip(&m.coefficients).map(|(a, b)| a * b).sum())
    }

    /// Dataset id the model was constrained on, if any.
    pub fn constraint_dataset(&self) -> Option<&str> {
        self.constraint_meta.as_ref().map(|m| m.dataset_id.as_str())
    }

    fn check_features(&self, ds: &TimeSeriesDataset) -> Result<(), ModelError> {
        if ds.feature_names() != self.feature_names.as_slice() {
            return Err(ModelError::FeatureMismatch {
                expected: self.feature_names.clone(),
                found: ds.feature_names().to_vec(),
            });
        }
        Ok(())
    }

    /// Structural checks after deserialization.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Format(m));
        if self.format != MODEL_FORMAT {
            return bad(format!("unexpected format `{}`", self.format));
        }
        if self.version != MODEL_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.modes.is_empty() {
            return bad("model has no modes".into());
        }
        if self.kind == ModelKind::Spcr && (self.modes.len() != 1 || !self.modes.contains_key(POOLED_MODE)) {
            return bad(format!("SPCR model must have exactly the `{POOLED_MODE}` entry"));
        }
        if (self.kind == ModelKind::Cpcr) != self.constraint_meta.is_some() {
            return bad("constraint metadata must be present exactly for CPCR".into());
        }
        let m = self.n_features();
        for (key, mm) in &self.modes {
            let pre = &mm.preprocessing;
            if pre.normalizer.means.len() != m
                || pre.normalizer.stds.len() != m
                || pre.pca.n_features() != m
                || pre.pca.eigenvalues.len() != pre.pca.n_components()
                || mm.coefficients.len() != pre.pca.n_components()
            {
                return bad(format!("inconsistent dimensions in mode `{key}`"));
            }
            if pre.normalizer.stds.iter().any(|s| !(*s > 0.0)) {
                return bad(format!("non-positive standard deviation in mode `{key}`"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let m: PcrModel = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let m: PcrModel = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        m.validate()?;
        Ok(m)
    }
}

/// Predicts every sample of `ds`, in order.
pub fn predict(model: &PcrModel, ds: &TimeSeriesDataset) -> Result<Vec<Prediction>, ModelError> {
    if ds.is_empty() && ds.n_features() == model.n_features() {
        return Ok(Vec::new());
    }
    model.check_features(ds)?;
    ds.samples()
        .iter()
        .map(|s| {
            let mode = ds.mode_label(s.mode);
            let y = model.predict_one(mode, &s.features)?;
            let raw = model.mode_model(mode)?.preprocessing.normalizer.denormalize_target(y);
            Ok(Prediction {
                timestamp: s.timestamp,
                mode: mode.to_string(),
                y_hat_norm: y,
                y_hat_raw: raw,
            })
        })
        .collect()
}

/// Normalized predictions only.
pub fn predict_normalized(model: &PcrModel, ds: &TimeSeriesDataset) -> Result<Vec<f64>, ModelError> {
    Ok(predict(model, ds)?.into_iter().map(|p| p.y_hat_norm).collect())
}
