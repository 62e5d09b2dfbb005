//! Experiment configuration documents (TOML).
//!
//! Every section rejects unknown keys. Parsing errors carry the dotted path
//! of the offending field; semantic validation runs before any compute.

use std::path::{Path, PathBuf};

use robustforge::attack::NamedAttack;
use robustforge::data::{load_idx, make_synthetic, Dataset, Split};
use robustforge::defense::{DefenseSpec, TrainConfig};
use robustforge::eval::{EvalOptions, ReportFormat};
use robustforge::model::{Architecture, InitScheme, ModelSpec};
use robustforge::Precision;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::presets;

/// Environment variable naming the directory that holds the MNIST IDX files.
pub const DATA_DIR_ENV: &str = "ROBUSTFORGE_DATA_DIR";

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_format")]
    pub report_format: ReportFormat,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub defense: DefenseSpec,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<NamedAttack>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn default_precision() -> Precision {
    Precision::F32
}

fn default_format() -> ReportFormat {
    ReportFormat::Csv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub init_seed: u64,
    /// Defaults to the architecture's own scheme.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_scheme: Option<InitScheme>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// The four standard MNIST IDX files under `root` (or the data-dir
    /// environment variable).
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_subset: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_subset: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
    Synthetic {
        train_size: usize,
        test_size: usize,
        class_count: usize,
        seed: u64,
    },
}

/// How black-box examples are produced: an independently initialised copy
/// of the model, trained with `source_defense`, attacked with `attack`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    /// Name of the entry in `attacks` that crafts the set; the first one
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<String>,
    pub source_init_seed: u64,
    /// Defaults to the run's own defense.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_defense: Option<DefenseSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum SweepParameter {
    PairingWeight,
    SqueezeWeight,
}

impl SweepParameter {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParameter::PairingWeight => "pairing_weight",
            SweepParameter::SqueezeWeight => "squeeze_weight",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
}

/// Weights of the logit pairing sweep figure.
pub fn default_grid() -> Vec<f64> {
    vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
}

/// Command-line adjustments applied on top of a config document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub precision: Option<Precision>,
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    /// Parses a TOML document. Errors name the dotted field path.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim_end().to_string();
            CliError::Config(if path == "." { msg } else { format!("{path}: {msg}") })
        })
    }

    /// Loads `spec` as a file path, or else as a shipped preset name.
    pub fn load(spec: &str) -> Result<Self, CliError> {
        let path = Path::new(spec);
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            return Self::from_toml(&text).map_err(|e| e.context(&path.display().to_string()));
        }
        match presets::get(spec) {
            Some(text) => Self::from_toml(text).map_err(|e| e.context(&format!("preset {spec}"))),
            None => Err(CliError::Config(format!(
                "`{spec}` is neither a file nor a preset (presets: {})",
                presets::NAMES.join(", ")
            ))),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(w) = o.workers {
            self.train.workers = w;
            self.eval.workers = w;
        }
        if let Some(p) = o.precision {
            self.precision = p;
        }
        if let Some(s) = o.seed {
            self.model.init_seed = s;
            self.train.seed = s;
        }
    }

    /// Fills every defaulted field so the written document is complete.
    pub fn resolve(&mut self) {
        if self.model.init_scheme.is_none() {
            self.model.init_scheme = Some(self.model.architecture.default_init());
        }
        if let Some(t) = &mut self.transfer {
            if t.attack.is_none() {
                t.attack = self.attacks.first().map(|a| a.name.clone());
            }
            if t.source_defense.is_none() {
                t.source_defense = Some(self.defense.clone());
            }
        }
    }

    /// Semantic checks that need no data.
    pub fn validate(&self) -> Result<(), CliError> {
        let field = |prefix: &str| {
            let prefix = prefix.to_string();
            move |e: robustforge::Error| CliError::Config(format!("{prefix}.{}", strip_invalid(&e)))
        };
        self.train.validate(&self.defense).map_err(field("defense"))?;
        for (i, a) in self.attacks.iter().enumerate() {
            a.config.validate().map_err(field(&format!("attacks[{i}]")))?;
        }
        let mut names: Vec<&str> = self.attacks.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("attacks: names must be unique".into()));
        }
        if self.eval.batch_size == 0 || self.eval.workers == 0 || self.train.workers == 0 {
            return Err(CliError::Config("eval.batch_size and workers must be >= 1".into()));
        }
        if let Some(t) = &self.transfer {
            if let Some(name) = &t.attack {
                if !self.attacks.iter().any(|a| &a.name == name) {
                    return Err(CliError::Config(format!("transfer.attack: no attack named `{name}`")));
                }
            }
            if let Some(d) = &t.source_defense {
                d.validate(self.train.batch_size).map_err(field("transfer.source_defense"))?;
            }
        }
        if let Some(s) = &self.sweep {
            if s.grid.is_empty() {
                return Err(CliError::Config("sweep.grid: must not be empty".into()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Named attack used to build transfer sets.
    pub fn transfer_attack(&self) -> Result<&NamedAttack, CliError> {
        let name = self.transfer.as_ref().and_then(|t| t.attack.as_deref());
        match name {
            Some(n) => self.attacks.iter().find(|a| a.name == n),
            None => self.attacks.first(),
        }
        .ok_or_else(|| CliError::Config("attacks: at least one attack is needed to build a transfer set".into()))
    }

    pub fn model_spec(&self, data: &Dataset) -> ModelSpec {
        ModelSpec {
            architecture: self.model.architecture,
            init_seed: self.model.init_seed,
            init_scheme: self.model.init_scheme.unwrap_or(self.model.architecture.default_init()),
            input_shape: data.image_shape(),
            class_count: data.class_count(),
        }
    }
}

fn strip_invalid(e: &robustforge::Error) -> String {
    match e {
        robustforge::Error::InvalidArgument(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Training and test splits named by a config.
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    pub fn load(&self) -> Result<Datasets, CliError> {
        match self {
            DataConfig::Synthetic {
                train_size,
                test_size,
                class_count,
                seed,
            } => Ok(Datasets {
                train: make_synthetic(*seed, *train_size, *class_count, Split::Train)?,
                test: make_synthetic(seed.wrapping_add(1), *test_size, *class_count, Split::Test)?,
            }),
            DataConfig::Mnist {
                root,
                train_subset,
                subset_seed,
            } => {
                let root = match root {
                    Some(r) => r.clone(),
                    None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                        CliError::Config(format!("data.root: not set and {DATA_DIR_ENV} is unset"))
                    })?,
                };
                let p = |i: usize| root.join(MNIST_FILES[i]);
                load_pair(&p(0), &p(1), &p(2), &p(3), *train_subset, *subset_seed)
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_subset,
                subset_seed,
            } => load_pair(train_images, train_labels, test_images, test_labels, *train_subset, *subset_seed),
        }
    }
}

fn load_pair(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
    train_subset: Option<usize>,
    subset_seed: u64,
) -> Result<Datasets, CliError> {
    let mut train = load_idx(train_images, train_labels, Split::Train)?;
    let mut test = load_idx(test_images, test_labels, Split::Test)?;
    let k = train.class_count().max(test.class_count());
    train = train.with_class_count(k)?;
    test = test.with_class_count(k)?;
    if train.image_shape() != test.image_shape() {
        return Err(CliError::Config(format!(
            "data: train images {:?} and test images {:?} differ in shape",
            train.image_shape(),
            test.image_shape()
        )));
    }
    if let Some(n) = train_subset {
        if n < train.len() {
            train = train.subset(&train.sample_indices(n, subset_seed));
        }
    }
    Ok(Datasets { train, test })
}
