//! Command-line interface: `generate`, `train`, `predict`, `evaluate`.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 solver error,
//! 4 model/data mismatch.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_csv, split_by_mode, CsvSchema, TimeSeriesDataset};
use crate::eval::{
    run_test_suite, write_comparison_csv, write_flat_csv, write_predictions_csv, EvalConfig, EvalError,
    ReportDocument,
};
use crate::model::{
    predict, train_cpcr, train_mpcr, train_spcr, InputFile, ModelError, ModelKind, PcrModel, Provenance,
    TrainConfig,
};
use crate::qp::RidgePolicy;
use crate::synth::{generate, write_outputs, SynthConfig, SynthError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

pub const MANIFEST_FORMAT: &str = "cpcr-manifest";

/// Effective settings of a run. Read from a flat JSON object; command-line
/// flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub coverage_threshold: f64,
    pub c: f64,
    pub max_gap_seconds: f64,
    pub qp_tol: f64,
    pub ridge: RidgePolicy,
    pub max_iter: Option<usize>,
    pub timestamp_column: String,
    pub mode_column: String,
    /// `null` reads every file as incomplete.
    pub target_column: Option<String>,
    /// Empty means every column not otherwise mapped.
    pub feature_columns: Vec<String>,
    /// Stamped into reports as `evaluated_at` when set.
    pub report_timestamp: Option<String>,
    /// Not echoed into artifacts so that reruns elsewhere stay identical.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let schema = CsvSchema::default();
        Self {
            coverage_threshold: train.coverage_threshold,
            c: train.c,
            max_gap_seconds: train.max_gap_seconds,
            qp_tol: train.qp_tol,
            ridge: train.ridge,
            max_iter: train.max_iter,
            timestamp_column: schema.timestamp,
            mode_column: schema.mode,
            target_column: schema.target,
            feature_columns: schema.features,
            report_timestamp: None,
            out_dir: None,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config document, rejecting unknown keys.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::input(format!("config is not valid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| CliError::input("config must be a JSON object"))?;
        let known = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let known = known.as_object().expect("config is an object");
        let unknown: Vec<&String> = obj
            .keys()
            .filter(|k| !known.contains_key(*k) && k.as_str() != "out_dir")
            .collect();
        if !unknown.is_empty() {
            return Err(CliError::input(format!("unknown config keys: {unknown:?}")));
        }
        serde_json::from_value(value).map_err(|e| CliError::input(format!("invalid config: {e}")))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            coverage_threshold: self.coverage_threshold,
            c: self.c,
            max_gap_seconds: self.max_gap_seconds,
            qp_tol: self.qp_tol,
            ridge: self.ridge,
            max_iter: self.max_iter,
        }
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            timestamp: self.timestamp_column.clone(),
            mode: self.mode_column.clone(),
            features: self.feature_columns.clone(),
            target: self.target_column.clone(),
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::Infeasible(_) | ModelError::IterationLimit { .. } | ModelError::Qp(_) => EXIT_SOLVER,
            ModelError::UnknownMode(_) | ModelError::FeatureMismatch { .. } => EXIT_MISMATCH,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => CliError::input(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(format!("I/O error: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "cpcr", version, about = "Constrained principal-component-regression soft sensors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Constraint parameter c.
    #[arg(long)]
    pub c: Option<f64>,
    /// Maximum time gap of a transition pair, in seconds.
    #[arg(long)]
    pub max_gap: Option<f64>,
    /// PCA variance coverage threshold.
    #[arg(long)]
    pub coverage: Option<f64>,
    /// Seed of the synthetic generator.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct DataArgs {
    /// Complete (labeled) data, `MODE=PATH` or `PATH` to split by mode column.
    #[arg(long, value_name = "[MODE=]PATH")]
    pub complete: Vec<String>,
    /// Incomplete (unlabeled) data, `ID=PATH` or `PATH` (id = file stem).
    #[arg(long, value_name = "[ID=]PATH")]
    pub incomplete: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic benchmark datasets.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train an MPCR, SPCR or CPCR model.
    Train {
        #[arg(long)]
        kind: ModelKind,
        #[command(flatten)]
        data: DataArgs,
        /// Model output path (default `<out>/<kind>.json`).
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict every sample of the given datasets.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Compare models on complete and incomplete data.
    Evaluate {
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

/// Lists what a command read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub command: String,
    pub run_config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<OutputFile>,
}

/// Runs the CLI on `args` (including the program name) and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common } => cmd_generate(&common),
        Command::Train {
            kind,
            data,
            model,
            common,
        } => cmd_train(kind, &data, model.as_deref(), &common),
        Command::Predict { model, data, common } => cmd_predict(&model, &data, &common),
        Command::Evaluate { model, data, common } => cmd_evaluate(&model, &data, &common),
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn base_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    inputs: Vec<InputFile>,
}

impl Context {
    fn new(common: &Common) -> Result<Self, CliError> {
        let mut inputs = Vec::new();
        let mut config = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
                inputs.push(InputFile {
                    role: "config".into(),
                    file: base_name(path),
                    sha256: sha256_file(path)?,
                });
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(c) = common.c {
            config.c = c;
        }
        if let Some(g) = common.max_gap {
            config.max_gap_seconds = g;
        }
        if let Some(v) = common.coverage {
            config.coverage_threshold = v;
        }
        if let Some(s) = common.seed {
            config.synth.seed = s;
        }
        let out = common
            .out
            .clone()
            .or_else(|| config.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self { config, out, inputs })
    }

    fn load(&mut self, role: &str, path: &Path) -> Result<TimeSeriesDataset, CliError> {
        let ds = load_csv(path, &self.config.schema())
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        self.inputs.push(InputFile {
            role: role.into(),
            file: base_name(path),
            sha256: sha256_file(path)?,
        });
        Ok(ds)
    }

    fn complete(&mut self, specs: &[String]) -> Result<BTreeMap<String, TimeSeriesDataset>, CliError> {
        let mut parts: BTreeMap<String, Vec<TimeSeriesDataset>> = BTreeMap::new();
        for spec in specs {
            let (tag, path) = split_tag(spec);
            let ds = self.load("complete", Path::new(path))?;
            match tag {
                Some(mode) => {
                    if let Some(i) = (0..ds.len()).find(|&i| ds.sample_mode(i) != mode) {
                        return Err(CliError::input(format!(
                            "{path}: row {} has mode `{}`, expected `{mode}`",
                            i + 1,
                            ds.sample_mode(i)
                        )));
                    }
                    parts.entry(mode.to_string()).or_default().push(ds);
                }
                None => {
                    for (mode, sub) in split_by_mode(&ds) {
                        parts.entry(mode).or_default().push(sub);
                    }
                }
            }
        }
        parts
            .into_iter()
            .map(|(mode, list)| {
                let ds = if list.len() == 1 {
                    list.into_iter().next().expect("one part")
                } else {
                    TimeSeriesDataset::concat(&list).map_err(|e| CliError::input(e.to_string()))?
                };
                Ok((mode, ds))
            })
            .collect()
    }

    fn incomplete(&mut self, specs: &[String]) -> Result<BTreeMap<String, TimeSeriesDataset>, CliError> {
        let mut out = BTreeMap::new();
        for spec in specs {
            let (tag, path) = split_tag(spec);
            let id = tag.map(str::to_string).unwrap_or_else(|| file_stem(Path::new(path)));
            let ds = self.load("incomplete", Path::new(path))?;
            if out.insert(id.clone(), ds).is_some() {
                return Err(CliError::input(format!("duplicate incomplete dataset id `{id}`")));
            }
        }
        Ok(out)
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            run_config: self.config.snapshot(),
            inputs: self.inputs.clone(),
        }
    }

    fn write_manifest(&self, command: &str, outputs: &[PathBuf]) -> Result<PathBuf, CliError> {
        let outputs = outputs
            .iter()
            .map(|p| {
                Ok(OutputFile {
                    file: base_name(p),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            command: command.into(),
            run_config: self.config.snapshot(),
            inputs: self.inputs.clone(),
            outputs,
        };
        let path = self.out.join(format!("{command}_manifest.json"));
        write_json(&path, &manifest)?;
        Ok(path)
    }
}

fn split_tag(spec: &str) -> (Option<&str>, &str) {
    match spec.split_once('=') {
        Some((tag, path)) if !tag.is_empty() => (Some(tag), path),
        _ => (None, spec),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::input(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::input(format!("cannot create {}: {e}", out.display())))
}

pub fn cmd_generate(common: &Common) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let out = generate(&ctx.config.synth)?;
    create_out(&ctx.out)?;
    let paths = write_outputs(&out, &ctx.out)?;
    ctx.write_manifest("generate", &paths)?;
    Ok(())
}

#[derive(Serialize)]
struct ConstraintReportFile<'a> {
    dataset_id: &'a str,
    c: f64,
    max_gap_seconds: f64,
    #[serde(flatten)]
    report: &'a crate::model::ConstraintBuildReport,
    provenance: &'a Provenance,
}

pub fn cmd_train(kind: ModelKind, data: &DataArgs, model_path: Option<&Path>, common: &Common) -> Result<(), CliError> {
    let mut ctx = Context::new(common)?;
    if data.complete.is_empty() {
        return Err(CliError::input("train needs at least one --complete dataset"));
    }
    let complete = ctx.complete(&data.complete)?;
    let cfg = ctx.config.train_config();
    let mut model = match kind {
        ModelKind::Mpcr => train_mpcr(&complete, &cfg)?,
        ModelKind::Spcr => train_spcr(&complete, &cfg)?,
        ModelKind::Cpcr => {
            if data.incomplete.len() != 1 {
                return Err(CliError::input("cpcr needs exactly one --incomplete dataset"));
            }
            let incomplete = ctx.incomplete(&data.incomplete)?;
            let (id, ds) = incomplete.iter().next().expect("one dataset");
            train_cpcr(&complete, id, ds, &cfg)?
        }
    };
    model.provenance = Some(ctx.provenance());
    create_out(&ctx.out)?;
    let path = model_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out.join(format!("{}.json", kind.label().to_lowercase())));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out(parent)?;
    }
    model.save(&path)?;
    let mut outputs = vec![path];
    if let Some(meta) = &model.constraint_meta {
        let report_path = ctx.out.join("constraint_report.json");
        write_json(
            &report_path,
            &ConstraintReportFile {
                dataset_id: &meta.dataset_id,
                c: meta.c,
                max_gap_seconds: meta.max_gap_seconds,
                report: &meta.report,
                provenance: model.provenance.as_ref().expect("set above"),
            },
        )?;
        outputs.push(report_path);
    }
    ctx.write_manifest("train", &outputs)?;
    Ok(())
}

fn load_model(ctx: &mut Context, path: &Path) -> Result<PcrModel, CliError> {
    let model = PcrModel::load(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    ctx.inputs.push(InputFile {
        role: "model".into(),
        file: base_name(path),
        sha256: sha256_file(path)?,
    });
    Ok(model)
}

pub fn cmd_predict(model_path: &Path, data: &DataArgs, common: &Common) -> Result<(), CliError> {
    let mut ctx = Context::new(common)?;
    let model = load_model(&mut ctx, model_path)?;
    let mut sets: Vec<(String, TimeSeriesDataset)> = Vec::new();
    for spec in &data.complete {
        let (tag, path) = split_tag(spec);
        let id = tag.map(str::to_string).unwrap_or_else(|| file_stem(Path::new(path)));
        sets.push((id, ctx.load("complete", Path::new(path))?));
    }
    sets.extend(ctx.incomplete(&data.incomplete)?);
    if sets.is_empty() {
        return Err(CliError::input("predict needs --complete or --incomplete data"));
    }
    create_out(&ctx.out)?;
    let stem = file_stem(model_path);
    let mut outputs = Vec::new();
    for (id, ds) in &sets {
        let preds = predict(&model, ds)?;
        let path = ctx.out.join(format!("predictions_{stem}_{id}.csv"));
        write_predictions_csv(&preds, BufWriter::new(File::create(&path)?))?;
        outputs.push(path);
    }
    ctx.write_manifest("predict", &outputs)?;
    Ok(())
}

pub fn cmd_evaluate(model_paths: &[PathBuf], data: &DataArgs, common: &Common) -> Result<(), CliError> {
    let mut ctx = Context::new(common)?;
    let mut models = Vec::new();
    let mut seen = BTreeSet::new();
    for path in model_paths {
        let name = file_stem(path);
        if !seen.insert(name.clone()) {
            return Err(CliError::input(format!("duplicate model name `{name}`")));
        }
        models.push((name, load_model(&mut ctx, path)?));
    }
    let complete = ctx.complete(&data.complete)?;
    let incomplete = ctx.incomplete(&data.incomplete)?;
    let eval_cfg = EvalConfig {
        max_gap_seconds: ctx.config.max_gap_seconds,
    };
    let reports = run_test_suite(&models, &complete, &incomplete, &eval_cfg)?;

    create_out(&ctx.out)?;
    let mut doc = ReportDocument::new(reports, &eval_cfg);
    doc.evaluated_at = ctx.config.report_timestamp.clone();
    doc.provenance = Some(ctx.provenance());
    let json = ctx.out.join("report.json");
    doc.save(&json)?;
    let flat = ctx.out.join("report_flat.csv");
    write_flat_csv(&doc.models, BufWriter::new(File::create(&flat)?))?;
    let table = ctx.out.join("comparison.csv");
    write_comparison_csv(&doc.models, BufWriter::new(File::create(&table)?))?;
    let mut outputs = vec![json, flat, table];
    for (name, model) in &models {
        for (id, ds) in &incomplete {
            let preds = predict(model, ds)?;
            let path = ctx.out.join(format!("plot_{name}_{id}.csv"));
            write_predictions_csv(&preds, BufWriter::new(File::create(&path)?))?;
            outputs.push(path);
        }
    }
    ctx.write_manifest("evaluate", &outputs)?;
    Ok(())
}
