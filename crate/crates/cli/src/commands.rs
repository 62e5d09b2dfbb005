//! The train / eval / attack / transfer / sweep / reproduce pipelines.
//!
//! Every command writes only beneath the config's output directory and
//! drops the fully resolved config beside its outputs.

use std::path::{Path, PathBuf};

use robustforge::checkpoint::{digest, load_checkpoint, save_checkpoint};
use robustforge::data::Dataset;
use robustforge::defense::{train, DefenseSpec, Pairing};
use robustforge::eval::{
    clean_report, emit_report, evaluate_blackbox, evaluate_whitebox, make_transfer_set, EvalReport, ReportFormat,
    TransferSet,
};
use robustforge::model::ModelParams;
use robustforge::{Precision, Scalar};
use serde::Serialize;

use crate::config::{Datasets, ExperimentConfig, Overrides, SweepParameter};
use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAINING_LOG: &str = "training_log.jsonl";
pub const TRANSFER_DIR: &str = "transfer_set";
pub const SOURCE_DIR: &str = "source";
pub const SWEEP_FILE: &str = "sweep.csv";

macro_rules! by_precision {
    ($p:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Loads, overrides, resolves and validates a config, before any compute.
pub fn prepare(spec: &str, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(spec)?;
    cfg.apply(overrides);
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

pub fn report_file(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Csv => "report.csv",
        ReportFormat::Jsonl => "report.jsonl",
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_resolved(cfg: &ExperimentConfig) -> Result<(), CliError> {
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(RESOLVED_CONFIG);
    std::fs::write(&path, cfg.to_toml()).map_err(|e| io_err(&path, e))
}

fn load_data(cfg: &ExperimentConfig) -> Result<Datasets, CliError> {
    let d = cfg.data.load()?;
    cfg.model_spec(&d.train).validate()?;
    Ok(d)
}

fn check_compatible<S: Scalar>(params: &ModelParams<S>, data: &Dataset, what: &Path) -> Result<(), CliError> {
    if params.input_shape() != data.image_shape() || params.class_count() != data.class_count() {
        return Err(CliError::Config(format!(
            "{}: model takes {:?} with {} classes, data has {:?} with {}",
            what.display(),
            params.input_shape(),
            params.class_count(),
            data.image_shape(),
            data.class_count()
        )));
    }
    Ok(())
}

/// Trains one model into `dir` (checkpoint + log) and returns it.
fn train_into<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Datasets,
    defense: &DefenseSpec,
    init_seed: u64,
    dir: &Path,
) -> Result<ModelParams<S>, CliError> {
    create_dir(dir)?;
    let mut spec = cfg.model_spec(&data.train);
    spec.init_seed = init_seed;
    let label = dir.display().to_string();
    let (params, log) = train::<S>(&spec, &data.train, &cfg.train, defense, None, |r| {
        eprintln!(
            "[{label}] epoch {} steps {} loss {:.4} clean acc {:.4} ({:.1}s)",
            r.epoch + 1,
            r.steps,
            r.loss.total,
            r.clean_accuracy,
            r.wall_time_s
        );
    })?;
    save_checkpoint(&params, &dir.join(CHECKPOINT))?;
    let log_path = dir.join(TRAINING_LOG);
    std::fs::write(&log_path, log.to_jsonl()).map_err(|e| io_err(&log_path, e))?;
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub digest: String,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary, CliError> {
    write_resolved(cfg)?;
    let data = load_data(cfg)?;
    by_precision!(cfg.precision, train_summary(cfg, &data))
}

fn train_summary<S: Scalar>(cfg: &ExperimentConfig, data: &Datasets) -> Result<TrainSummary, CliError> {
    let params = train_into::<S>(cfg, data, &cfg.defense, cfg.model.init_seed, &cfg.output_dir)?;
    Ok(TrainSummary {
        checkpoint: cfg.output_dir.join(CHECKPOINT),
        digest: digest(&params),
    })
}

fn load_model<S: Scalar>(path: &Path, data: &Datasets) -> Result<ModelParams<S>, CliError> {
    let params = load_checkpoint::<S>(path)?;
    check_compatible(&params, &data.test, path)?;
    Ok(params)
}

/// Where black-box examples for an evaluation come from.
#[derive(Debug, Clone, PartialEq)]
pub enum BlackBoxSource {
    None,
    /// Craft a fresh transfer set on this checkpoint.
    Checkpoint(PathBuf),
    /// Use a transfer set saved by `attack` or `transfer`.
    TransferSet(PathBuf),
}

/// White-box suite, optional black-box transfer and clean accuracy for one
/// checkpoint, written as one report file.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, black_box: &BlackBoxSource) -> Result<Vec<EvalReport>, CliError> {
    write_resolved(cfg)?;
    let data = load_data(cfg)?;
    let reports = by_precision!(cfg.precision, eval_reports(cfg, &data, checkpoint, black_box))?;
    emit(cfg, &reports)?;
    Ok(reports)
}

fn emit(cfg: &ExperimentConfig, reports: &[EvalReport]) -> Result<(), CliError> {
    emit_report(reports, &cfg.output_dir.join(report_file(cfg.report_format)), cfg.report_format)?;
    Ok(())
}

fn eval_reports<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Datasets,
    checkpoint: &Path,
    black_box: &BlackBoxSource,
) -> Result<Vec<EvalReport>, CliError> {
    let params = load_model::<S>(checkpoint, data)?;
    let mut reports = Vec::new();
    if !cfg.attacks.is_empty() {
        reports.push(evaluate_whitebox(&params, &data.test, &cfg.attacks, &cfg.eval)?);
    }
    match black_box {
        BlackBoxSource::None => {}
        BlackBoxSource::Checkpoint(src) => {
            let source = load_model::<S>(src, data)?;
            let set = make_transfer_set(&source, &data.test, cfg.transfer_attack()?, &cfg.eval)?;
            reports.push(evaluate_blackbox(&params, &set)?);
        }
        BlackBoxSource::TransferSet(dir) => {
            let set = TransferSet::load(dir)?;
            reports.push(evaluate_blackbox(&params, &set)?);
        }
    }
    reports.push(clean_report(&params, &data.test, &cfg.eval)?);
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSummary {
    pub directory: PathBuf,
    pub source_model_id: String,
    pub sample_count: usize,
    pub source_accuracy: f64,
}

/// Crafts a transfer set on `checkpoint` with the config's transfer attack.
pub fn cmd_attack(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<AttackSummary, CliError> {
    write_resolved(cfg)?;
    let data = load_data(cfg)?;
    by_precision!(cfg.precision, attack_into(cfg, &data, checkpoint))
}

fn attack_into<S: Scalar>(cfg: &ExperimentConfig, data: &Datasets, checkpoint: &Path) -> Result<AttackSummary, CliError> {
    let params = load_model::<S>(checkpoint, data)?;
    let set = make_transfer_set(&params, &data.test, cfg.transfer_attack()?, &cfg.eval)?;
    let dir = cfg.output_dir.join(TRANSFER_DIR);
    set.save(&dir)?;
    Ok(AttackSummary {
        directory: dir,
        source_model_id: set.source_model_id.clone(),
        sample_count: set.len(),
        source_accuracy: robustforge::eval::accuracy(&params, &set.adversarial_dataset()?, cfg.eval.batch_size)?,
    })
}

/// Black-box evaluation of `target` on examples crafted against `source`.
pub fn cmd_transfer(cfg: &ExperimentConfig, source: &Path, target: &Path) -> Result<EvalReport, CliError> {
    write_resolved(cfg)?;
    let data = load_data(cfg)?;
    let report = by_precision!(cfg.precision, transfer_report(cfg, &data, source, target))?;
    emit(cfg, std::slice::from_ref(&report))?;
    Ok(report)
}

fn transfer_report<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Datasets,
    source: &Path,
    target: &Path,
) -> Result<EvalReport, CliError> {
    let src = load_model::<S>(source, data)?;
    let tgt = load_model::<S>(target, data)?;
    if digest(&src) == digest(&tgt) {
        return Err(robustforge::Error::SameModel(digest(&src)).into());
    }
    let set = make_transfer_set(&src, &data.test, cfg.transfer_attack()?, &cfg.eval)?;
    set.save(&cfg.output_dir.join(TRANSFER_DIR))?;
    Ok(evaluate_blackbox(&tgt, &set)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: SweepParameter,
    pub weight: f64,
    pub white_box_accuracy: Option<f64>,
    pub clean_accuracy: Option<f64>,
    pub status: String,
}

/// Trains and evaluates one model per grid value (shared seeds). A failing
/// point is recorded and the sweep moves on.
pub fn cmd_sweep(cfg: &ExperimentConfig, parameter: SweepParameter, grid: &[f64]) -> Result<Vec<SweepRow>, CliError> {
    if grid.is_empty() {
        return Err(CliError::Config("sweep.grid: must not be empty".into()));
    }
    if cfg.attacks.is_empty() {
        return Err(CliError::Config("attacks: a sweep needs at least one attack".into()));
    }
    if parameter == SweepParameter::PairingWeight && cfg.defense.pairing == Pairing::None {
        return Err(CliError::Config(
            "defense.pairing: sweeping pairing_weight needs pairing = \"alp\" or \"clp\"".into(),
        ));
    }
    write_resolved(cfg)?;
    let data = load_data(cfg)?;
    let mut rows = Vec::with_capacity(grid.len());
    for (i, &w) in grid.iter().enumerate() {
        let mut defense = cfg.defense.clone();
        match parameter {
            SweepParameter::PairingWeight => defense.pairing_weight = w,
            SweepParameter::SqueezeWeight => defense.squeeze_weight = w,
        }
        let dir = cfg.output_dir.join(format!("point-{i:02}"));
        let result = defense
            .validate(cfg.train.batch_size)
            .map_err(CliError::from)
            .and_then(|_| by_precision!(cfg.precision, sweep_point(cfg, &data, &defense, &dir)));
        let row = match result {
            Ok((wb, clean)) => SweepRow {
                parameter,
                weight: w,
                white_box_accuracy: Some(wb),
                clean_accuracy: Some(clean),
                status: "ok".into(),
            },
            Err(e) => {
                eprintln!("sweep point {} = {w} failed: {e}", parameter.as_str());
                SweepRow {
                    parameter,
                    weight: w,
                    white_box_accuracy: None,
                    clean_accuracy: None,
                    status: format!("failed: {e}"),
                }
            }
        };
        rows.push(row);
    }
    write_sweep(&cfg.output_dir.join(SWEEP_FILE), &rows)?;
    Ok(rows)
}

fn sweep_point<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Datasets,
    defense: &DefenseSpec,
    dir: &Path,
) -> Result<(f64, f64), CliError> {
    let params = train_into::<S>(cfg, data, defense, cfg.model.init_seed, dir)?;
    let wb = evaluate_whitebox(&params, &data.test, &cfg.attacks, &cfg.eval)?;
    let clean = clean_report(&params, &data.test, &cfg.eval)?;
    Ok((wb.worst_case_accuracy, clean.worst_case_accuracy))
}

fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let csv_err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(["parameter", "weight", "white_box_accuracy", "clean_accuracy", "status"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.parameter.as_str().to_string(),
            r.weight.to_string(),
            fmt(r.white_box_accuracy),
            fmt(r.clean_accuracy),
            r.status.clone(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReproduceSummary {
    pub model_id: String,
    pub white_box: Option<f64>,
    pub black_box: Option<f64>,
    pub clean: f64,
    pub reports: Vec<EvalReport>,
}

/// Full table row for a preset: train the model, train an independently
/// initialised source copy, then report white-box, black-box and clean
/// accuracy.
pub fn cmd_reproduce(cfg: &ExperimentConfig) -> Result<ReproduceSummary, CliError> {
    write_resolved(cfg)?;
    let data = load_data(cfg)?;
    let reports = by_precision!(cfg.precision, reproduce_reports(cfg, &data))?;
    emit(cfg, &reports)?;
    let find = |t| reports.iter().find(|r| r.threat_model == t).map(|r| r.worst_case_accuracy);
    use robustforge::eval::ThreatModel;
    Ok(ReproduceSummary {
        model_id: reports[0].model_id.clone(),
        white_box: find(ThreatModel::WhiteBox),
        black_box: find(ThreatModel::BlackBox),
        clean: find(ThreatModel::Clean).expect("clean report is always present"),
        reports,
    })
}

fn reproduce_reports<S: Scalar>(cfg: &ExperimentConfig, data: &Datasets) -> Result<Vec<EvalReport>, CliError> {
    let params = train_into::<S>(cfg, data, &cfg.defense, cfg.model.init_seed, &cfg.output_dir)?;
    let mut reports = Vec::new();
    if !cfg.attacks.is_empty() {
        reports.push(evaluate_whitebox(&params, &data.test, &cfg.attacks, &cfg.eval)?);
    }
    if let Some(t) = &cfg.transfer {
        let defense = t.source_defense.as_ref().unwrap_or(&cfg.defense);
        let source = train_into::<S>(cfg, data, defense, t.source_init_seed, &cfg.output_dir.join(SOURCE_DIR))?;
        let set = make_transfer_set(&source, &data.test, cfg.transfer_attack()?, &cfg.eval)?;
        set.save(&cfg.output_dir.join(TRANSFER_DIR))?;
        reports.push(evaluate_blackbox(&params, &set)?);
    }
    reports.push(clean_report(&params, &data.test, &cfg.eval)?);
    Ok(reports)
}
