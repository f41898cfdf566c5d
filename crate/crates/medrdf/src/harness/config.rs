//! The experiment configuration file: one TOML document with a flat
//! section per module, the single source of truth for a reproducible run.
//!
//! ```toml
//! [dataset]
//! kind = "synthetic"    # or directory | idx | csv
//! classes = 3
//! train = 600
//! val = 100
//! test = 100
//! seed = 7
//!
//! [train]
//! epochs = 30
//! learning_rate = 0.05
//! momentum = 0.9
//! weight_decay = 1e-6
//! lr_decay_epochs = [15, 22]
//! lr_decay_factor = 0.1
//! batch_size = 32
//! seed = 1
//!
//! [[attack]]
//! kind = "pgd"
//! epsilon = "8/255"
//! steps = 20
//!
//! [[medrdf]]
//! noise = { kind = "salt_and_pepper", sigma = 0.1 }
//! denoiser = { kind = "median_filter", window = 3 }
//! copies = 10000
//! alpha = 0.001
//!
//! [eval]
//! out_dir = "out"
//! rm_threshold = 1.0
//! ```
//!
//! Budgets may be written as fractions (`"8/255"`) or plain floats.

use crate::attacks::AttackSpec;
use crate::classifier::TrainConfig;
use crate::engine::MedRdfConfig;
use crate::error::{Error, Result};
use crate::harness::dataset::{DatasetSource, Split, SyntheticSpec};
use serde::{Deserialize, Deserializer, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Optional checkpoint to load instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, deserialize_with = "attack_list")]
    pub attack: Vec<AttackSpec>,
    #[serde(default = "default_engines")]
    pub medrdf: Vec<MedRdfConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_engines() -> Vec<MedRdfConfig> {
    vec![MedRdfConfig::default()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
    /// `root` must contain `train/` and `test/` (and optionally `val/`)
    /// subdirectories of class-named folders.
    Directory { root: PathBuf },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv { train: PathBuf, test: PathBuf },
}

impl DatasetConfig {
    pub fn source_for(&self, split: Split) -> Result<DatasetSource> {
        Ok(match self {
            DatasetConfig::Synthetic { spec } => DatasetSource::Synthetic(spec.clone()),
            DatasetConfig::Directory { root } => DatasetSource::Directory {
                root: root.join(split.as_str()),
            },
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => match split {
                Split::Train => DatasetSource::Idx {
                    images: train_images.clone(),
                    labels: train_labels.clone(),
                },
                Split::Test => DatasetSource::Idx {
                    images: test_images.clone(),
                    labels: test_labels.clone(),
                },
                Split::Val => {
                    return Err(Error::InvalidConfig(
                        "idx datasets carry no validation split".into(),
                    ))
                }
            },
            DatasetConfig::Csv { train, test } => DatasetSource::Csv {
                path: match split {
                    Split::Train => train.clone(),
                    Split::Test => test.clone(),
                    Split::Val => {
                        return Err(Error::InvalidConfig(
                            "csv datasets carry no validation split".into(),
                        ))
                    }
                },
            },
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Robust Metric acceptance threshold; `None` selects 1 for tasks with
    /// fewer than seven classes and 3 otherwise.
    pub rm_threshold: Option<f64>,
    pub out_dir: PathBuf,
    /// Global seed mixed into per-image attack and engine seeds; the CLI
    /// `--seed` flag overrides it.
    pub master_seed: u64,
    /// Cap on test images, for quick smoke runs.
    pub limit_test: Option<usize>,
    /// Noise scales for the sigma sweep.
    pub sweep_sigmas: Vec<f64>,
    /// Budgets for the sigma sweep rows (`0` means no attack).
    #[serde(deserialize_with = "budget_list")]
    pub sweep_epsilons: Vec<f64>,
    /// Attack steps used inside the sigma sweep.
    pub sweep_attack_steps: usize,
    /// Copy counts for the copy-count sweep.
    pub sweep_copies: Vec<usize>,
    /// Copies per prediction inside sweeps (headline tables use each
    /// engine's own `copies`).
    pub sweep_prediction_copies: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rm_threshold: None,
            out_dir: PathBuf::from("out"),
            master_seed: 0,
            limit_test: None,
            sweep_sigmas: vec![0.05, 0.1, 0.2, 0.3],
            sweep_epsilons: vec![0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0],
            sweep_attack_steps: 100,
            sweep_copies: vec![100, 1_000, 10_000],
            sweep_prediction_copies: 1_000,
        }
    }
}

impl EvalConfig {
    pub fn rm_threshold_for(&self, num_classes: usize) -> f64 {
        self.rm_threshold
            .unwrap_or(if num_classes >= 7 { 3.0 } else { 1.0 })
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(display.clone(), e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| {
            let offset = e
                .span()
                .map(|s| s.start as u64)
                .unwrap_or(0);
            Error::parse(display, offset, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetConfig::Synthetic { spec } = &self.dataset {
            spec.validate()?;
        }
        self.train.validate()?;
        for a in &self.attack {
            a.validate()?;
        }
        if self.medrdf.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one [[medrdf]] section is required".into(),
            ));
        }
        for m in &self.medrdf {
            m.validate()?;
        }
        if self.eval.sweep_sigmas.is_empty() || self.eval.sweep_epsilons.is_empty() {
            return Err(Error::InvalidConfig("sweep lists must be non-empty".into()));
        }
        if self.eval.sweep_copies.is_empty() {
            return Err(Error::InvalidConfig("sweep_copies must be non-empty".into()));
        }
        Ok(())
    }
}

/// Accepts a budget as a float or a fraction string like `"8/255"`.
pub fn parse_budget(raw: &str) -> Result<f64> {
    let raw = raw.trim();
    if let Some((num, den)) = raw.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("bad budget numerator {num}: {e}")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("bad budget denominator {den}: {e}")))?;
        if d == 0.0 {
            return Err(Error::InvalidConfig("budget denominator is zero".into()));
        }
        Ok(n / d)
    } else {
        raw.parse()
            .map_err(|e| Error::InvalidConfig(format!("bad budget {raw}: {e}")))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Budget {
    Number(f64),
    Fraction(String),
}

impl Budget {
    fn resolve(self) -> std::result::Result<f64, String> {
        match self {
            Budget::Number(v) => Ok(v),
            Budget::Fraction(s) => parse_budget(&s).map_err(|e| e.to_string()),
        }
    }
}

fn budget_list<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Vec<f64>, D::Error> {
    let raw: Vec<Budget> = Vec::deserialize(de)?;
    raw.into_iter()
        .map(|b| b.resolve().map_err(serde::de::Error::custom))
        .collect()
}

/// `AttackSpec` with the epsilon field accepting fraction strings.
#[derive(Deserialize)]
struct AttackSpecToml {
    #[serde(flatten)]
    rest: toml::Table,
    epsilon: Budget,
}

fn attack_list<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Vec<AttackSpec>, D::Error> {
    use serde::de::Error as DeError;
    let raw: Vec<AttackSpecToml> = Vec::deserialize(de)?;
    raw.into_iter()
        .map(|entry| {
            let eps = entry.epsilon.resolve().map_err(DeError::custom)?;
            let mut table = entry.rest;
            table.insert("epsilon".into(), toml::Value::Float(eps));
            toml::Value::Table(table)
                .try_into::<AttackSpec>()
                .map_err(DeError::custom)
        })
        .collect()
}
