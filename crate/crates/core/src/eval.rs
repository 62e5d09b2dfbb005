//! White-box, black-box and clean evaluation, transfer sets, and report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, run_suite, AttackAccuracy, NamedAttack, SuiteOptions};
use crate::checkpoint::digest;
use crate::data::{load_idx, pixel_to_byte, write_idx_images, write_idx_labels, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fraction of examples whose argmax (lowest index on ties) equals the label.
pub fn accuracy<S: Scalar>(params: &ModelParams<S>, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let b: Batch<S> = dataset.batch(chunk);
        let pred = params.predict(&b.images)?;
        correct += pred.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Clean accuracy on a test split.
pub fn evaluate_clean<S: Scalar>(params: &ModelParams<S>, dataset: &Dataset) -> Result<f64> {
    if dataset.split() != Split::Test {
        return Err(Error::InvalidArgument("clean evaluation expects the test split".into()));
    }
    accuracy(params, dataset, 500)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreatModel {
    WhiteBox,
    BlackBox,
    Clean,
}

impl ThreatModel {
    pub fn as_str(self) -> &'static str {
        match self {
            ThreatModel::WhiteBox => "white_box",
            ThreatModel::BlackBox => "black_box",
            ThreatModel::Clean => "clean",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "white_box" => Ok(ThreatModel::WhiteBox),
            "black_box" => Ok(ThreatModel::BlackBox),
            "clean" => Ok(ThreatModel::Clean),
            other => Err(Error::Format {
                what: "report",
                detail: format!("unknown threat model `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub threat_model: ThreatModel,
    pub per_attack: Vec<AttackAccuracy>,
    pub worst_case_accuracy: f64,
    pub sample_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Seeded subset size for attack suites; `None` uses the whole set.
    #[serde(default)]
    pub subset_size: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_batch() -> usize {
    100
}

fn default_workers() -> usize {
    1
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            subset_size: Some(1000),
            subset_seed: 0,
            batch_size: default_batch(),
            workers: default_workers(),
        }
    }
}

impl EvalOptions {
    /// The examples attack suites run on.
    pub fn subset(&self, dataset: &Dataset) -> Dataset {
        match self.subset_size {
            Some(n) if n < dataset.len() => dataset.subset(&dataset.sample_indices(n, self.subset_seed)),
            _ => dataset.clone(),
        }
    }

    fn suite_options(&self) -> SuiteOptions {
        SuiteOptions {
            batch_size: self.batch_size,
            workers: self.workers,
        }
    }
}

pub const CLEAN_ROW: &str = "clean";

/// Clean accuracy over the full dataset, as a report.
pub fn clean_report<S: Scalar>(params: &ModelParams<S>, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let acc = evaluate_clean(params, dataset)?;
    Ok(EvalReport {
        model_id: digest(params),
        threat_model: ThreatModel::Clean,
        per_attack: vec![AttackAccuracy {
            name: CLEAN_ROW.into(),
            accuracy: acc,
            config_digest: "-".into(),
        }],
        worst_case_accuracy: acc,
        sample_count: dataset.len(),
        seed: opts.subset_seed,
    })
}

/// Attacks the model with its own gradients.
pub fn evaluate_whitebox<S: Scalar>(
    params: &ModelParams<S>,
    dataset: &Dataset,
    suite: &[NamedAttack],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let subset = opts.subset(dataset);
    let r = run_suite(params, &subset, suite, opts.suite_options())?;
    Ok(EvalReport {
        model_id: digest(params),
        threat_model: ThreatModel::WhiteBox,
        per_attack: r.per_attack,
        worst_case_accuracy: r.worst_case_accuracy,
        sample_count: r.sample_count,
        seed: opts.subset_seed,
    })
}

/// Adversarial examples crafted on a source model, stored with their clean
/// originals so the norm-ball invariants can be re-checked.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSet {
    pub source_model_id: String,
    pub attack: NamedAttack,
    pub clean: Tensor<f32>,
    pub adversarial: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferManifest {
    format_version: u32,
    source_model_id: String,
    attack: NamedAttack,
    config_digest: String,
    class_count: usize,
    sample_count: usize,
}

const TRANSFER_VERSION: u32 = 1;
const CLEAN_FILE: &str = "clean-images.idx";
const ADV_FILE: &str = "adversarial-images.idx";
const LABEL_FILE: &str = "labels.idx";
const MANIFEST_FILE: &str = "manifest.json";

pub fn make_transfer_set<S: Scalar>(
    source: &ModelParams<S>,
    dataset: &Dataset,
    attack: &NamedAttack,
    opts: &EvalOptions,
) -> Result<TransferSet> {
    let subset = opts.subset(dataset);
    let idx: Vec<usize> = (0..subset.len()).collect();
    let mut adv = Vec::with_capacity(subset.images().len());
    for chunk in idx.chunks(opts.batch_size.max(1)) {
        let b: Batch<S> = subset.batch(chunk);
        let out = run_attack(source, &b, &attack.config).map_err(|e| Error::Attack {
            attack: attack.name.clone(),
            source: Box::new(e),
        })?;
        adv.extend(out.adversarial.data().iter().map(|v| v.as_f64() as f32));
    }
    let adversarial = Tensor::new(subset.images().shape().to_vec(), adv)?;
    // f32 rounding of an f64 run can land a hair outside the ball
    let adversarial = clamp_to_ball(&adversarial, subset.images(), attack.config.epsilon);
    Ok(TransferSet {
        source_model_id: digest(source),
        attack: attack.clone(),
        clean: subset.images().clone(),
        adversarial,
        labels: subset.labels().to_vec(),
        class_count: subset.class_count(),
    })
}

fn clamp_to_ball(adv: &Tensor<f32>, clean: &Tensor<f32>, eps: f64) -> Tensor<f32> {
    let data = adv
        .data()
        .iter()
        .zip(clean.data())
        .map(|(&a, &c)| {
            let (lo, hi) = ((c as f64 - eps).max(0.0), (c as f64 + eps).min(1.0));
            (a as f64).clamp(lo, hi) as f32
        })
        .collect();
    Tensor::new(adv.shape().to_vec(), data).expect("same shape")
}

impl TransferSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn config_digest(&self) -> String {
        self.attack.config.digest()
    }

    /// Checks `|adv - clean|_inf <= eps + 1e-6` and the pixel range.
    pub fn validate(&self) -> Result<()> {
        if self.clean.shape() != self.adversarial.shape() || self.clean.rows() != self.labels.len() {
            return Err(Error::DimensionMismatch("transfer set parts disagree in size".into()));
        }
        let eps = self.attack.config.epsilon;
        for (i, (&a, &c)) in self.adversarial.data().iter().zip(self.clean.data()).enumerate() {
            if !(0.0..=1.0).contains(&a) || (a as f64 - c as f64).abs() > eps + 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "transfer example {} violates the epsilon ball: adv {a}, clean {c}, eps {eps}",
                    i / self.clean.row_len()
                )));
            }
        }
        Ok(())
    }

    /// The adversarial images as a test dataset.
    pub fn adversarial_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.adversarial.clone(), self.labels.clone(), self.class_count, Split::Test)
    }

    /// Writes the IDX triple and manifest into `dir`. Pixels are stored as
    /// bytes; adversarial bytes are re-clamped to the quantised ball so the
    /// stored pair still satisfies the invariants.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let budget = (self.attack.config.epsilon * 255.0 + 1e-9).floor() as i32;
        let adv_bytes: Vec<f32> = self
            .adversarial
            .data()
            .iter()
            .zip(self.clean.data())
            .map(|(&a, &c)| {
                let cb = pixel_to_byte(c) as i32;
                let ab = (pixel_to_byte(a) as i32).clamp(cb - budget, cb + budget);
                ab.clamp(0, 255) as f32 / 255.0
            })
            .collect();
        let adv = Tensor::new(self.adversarial.shape().to_vec(), adv_bytes)?;
        write_idx_images(&self.clean, &dir.join(CLEAN_FILE))?;
        write_idx_images(&adv, &dir.join(ADV_FILE))?;
        write_idx_labels(&self.labels, &dir.join(LABEL_FILE))?;
        let manifest = TransferManifest {
            format_version: TRANSFER_VERSION,
            source_model_id: self.source_model_id.clone(),
            attack: self.attack.clone(),
            config_digest: self.config_digest(),
            class_count: self.class_count,
            sample_count: self.len(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: TransferManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "transfer manifest",
            detail: e.to_string(),
        })?;
        if m.format_version != TRANSFER_VERSION {
            return Err(Error::VersionMismatch {
                expected: TRANSFER_VERSION,
                found: m.format_version,
            });
        }
        if m.config_digest != m.attack.config.digest() {
            return Err(Error::Format {
                what: "transfer manifest",
                detail: "config digest does not match the stored attack".into(),
            });
        }
        let clean = load_idx(&dir.join(CLEAN_FILE), &dir.join(LABEL_FILE), Split::Test)?;
        let adv = load_idx(&dir.join(ADV_FILE), &dir.join(LABEL_FILE), Split::Test)?;
        if clean.len() != m.sample_count {
            return Err(Error::DimensionMismatch(format!(
                "manifest lists {} examples, files hold {}",
                m.sample_count,
                clean.len()
            )));
        }
        let set = TransferSet {
            source_model_id: m.source_model_id,
            attack: m.attack,
            clean: clean.images().clone(),
            adversarial: adv.images().clone(),
            labels: clean.labels().to_vec(),
            class_count: m.class_count,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Accuracy of `target` on a frozen transfer set. The target must not be the
/// model the set was crafted on.
pub fn evaluate_blackbox<S: Scalar>(target: &ModelParams<S>, transfer: &TransferSet) -> Result<EvalReport> {
    let target_id = digest(target);
    if target_id == transfer.source_model_id {
        return Err(Error::SameModel(target_id));
    }
    let acc = accuracy(target, &transfer.adversarial_dataset()?, 500)?;
    Ok(EvalReport {
        model_id: target_id,
        threat_model: ThreatModel::BlackBox,
        per_attack: vec![AttackAccuracy {
            name: transfer.attack.name.clone(),
            accuracy: acc,
            config_digest: transfer.config_digest(),
        }],
        worst_case_accuracy: acc,
        sample_count: transfer.len(),
        seed: transfer.attack.config.rng_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

pub const CSV_HEADER: [&str; 8] = [
    "model_id",
    "threat_model",
    "attack",
    "accuracy",
    "worst_case",
    "seed",
    "digest",
    "sample_count",
];

/// Attack column value of the summary row closing each report.
pub const WORST_CASE_ROW: &str = "worst_case";

/// Serialises reports. CSV gets one row per attack plus one worst-case row
/// per report; JSONL gets one object per report.
pub fn render_reports(reports: &[EvalReport], format: ReportFormat) -> Result<Vec<u8>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to emit".into()));
    }
    match format {
        ReportFormat::Jsonl => Ok(reports
            .iter()
            .map(|r| serde_json::to_string(r).expect("report serialises") + "\n")
            .collect::<String>()
            .into_bytes()),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let fmt_err = |e: csv::Error| Error::Format {
                what: "report",
                detail: e.to_string(),
            };
            w.write_record(CSV_HEADER).map_err(fmt_err)?;
            for r in reports {
                let worst = r.worst_case_accuracy.to_string();
                let (seed, n) = (r.seed.to_string(), r.sample_count.to_string());
                for a in &r.per_attack {
                    let acc = a.accuracy.to_string();
                    w.write_record([
                        r.model_id.as_str(),
                        r.threat_model.as_str(),
                        &a.name,
                        &acc,
                        &worst,
                        &seed,
                        &a.config_digest,
                        &n,
                    ])
                    .map_err(fmt_err)?;
                }
                w.write_record([
                    r.model_id.as_str(),
                    r.threat_model.as_str(),
                    WORST_CASE_ROW,
                    &worst,
                    &worst,
                    &seed,
                    "-",
                    &n,
                ])
                .map_err(fmt_err)?;
            }
            w.into_inner().map_err(|e| Error::Format {
                what: "report",
                detail: e.to_string(),
            })
        }
    }
}

pub fn emit_report(reports: &[EvalReport], path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = render_reports(reports, format)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_reports(path: &Path, format: ReportFormat) -> Result<Vec<EvalReport>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_reports(&bytes, format)
}

pub fn parse_reports(bytes: &[u8], format: ReportFormat) -> Result<Vec<EvalReport>> {
    let bad = |detail: String| Error::Format { what: "report", detail };
    match format {
        ReportFormat::Jsonl => std::str::from_utf8(bytes)
            .map_err(|e| bad(e.to_string()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| bad(e.to_string())))
            .collect(),
        ReportFormat::Csv => {
            let mut rdr = csv::Reader::from_reader(bytes);
            let header: Vec<String> = rdr
                .headers()
                .map_err(|e| bad(e.to_string()))?
                .iter()
                .map(String::from)
                .collect();
            if header != CSV_HEADER {
                return Err(bad(format!("unexpected header {header:?}")));
            }
            let mut reports = Vec::new();
            let mut pending: Vec<AttackAccuracy> = Vec::new();
            for rec in rdr.records() {
                let rec = rec.map_err(|e| bad(e.to_string()))?;
                let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", CSV_HEADER[i])));
                if &rec[2] == WORST_CASE_ROW {
                    reports.push(EvalReport {
                        model_id: rec[0].to_string(),
                        threat_model: ThreatModel::parse(&rec[1])?,
                        per_attack: std::mem::take(&mut pending),
                        worst_case_accuracy: num(4)?,
                        sample_count: rec[7].parse().map_err(|e| bad(format!("sample_count: {e}")))?,
                        seed: rec[5].parse().map_err(|e| bad(format!("seed: {e}")))?,
                    });
                } else {
                    pending.push(AttackAccuracy {
                        name: rec[2].to_string(),
                        accuracy: num(3)?,
                        config_digest: rec[6].to_string(),
                    });
                }
            }
            if !pending.is_empty() {
                return Err(bad("rows after the last worst-case row".into()));
            }
            Ok(reports)
        }
    }
}
