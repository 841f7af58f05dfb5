//! Declarative run configuration, dotted-key overrides, and presets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentPolicy, CifarVariant, Normalization, SplitSpec};
use crate::error::{ClafError, Result};
use crate::feature_aug::FaConfig;
use crate::model::ModelConfig;
use crate::nn::{BackboneKind, SgdConfig};
use crate::pseudo_label::PseudoLabelConfig;
use crate::trainer::Pipeline;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Cifar100,
}

impl DataSource {
    pub fn cifar_variant(self) -> Option<CifarVariant> {
        match self {
            DataSource::Synthetic => None,
            DataSource::Cifar10 => Some(CifarVariant::Cifar10),
            DataSource::Cifar100 => Some(CifarVariant::Cifar100),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_classes: usize,
    pub labeled_head: usize,
    pub unlabeled_head: usize,
    pub imbalance_ratio: f64,
    /// Dataset cache directory; empty means `$CLAF_DATA_DIR` or `./data`.
    pub root: String,
    /// Images per class in the synthetic training pool.
    pub synthetic_train_per_class: usize,
    /// Images per class in the balanced synthetic test set.
    pub synthetic_test_per_class: usize,
    pub synthetic_size: usize,
    pub synthetic_noise: f32,
    /// Seed of the synthetic image generator (fixed across run seeds, like a
    /// downloaded dataset).
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Cifar10,
            num_classes: 10,
            labeled_head: 500,
            unlabeled_head: 4000,
            imbalance_ratio: 100.0,
            root: String::new(),
            synthetic_train_per_class: 1000,
            synthetic_test_per_class: 100,
            synthetic_size: 32,
            synthetic_noise: 0.1,
            synthetic_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            num_classes: self.num_classes,
            labeled_head: self.labeled_head,
            unlabeled_head: self.unlabeled_head,
            imbalance_ratio: self.imbalance_ratio,
            seed,
        }
    }

    pub fn normalization(&self) -> Normalization {
        match self.source {
            DataSource::Synthetic => Normalization::CENTERED,
            DataSource::Cifar10 => Normalization::CIFAR10,
            DataSource::Cifar100 => Normalization::CIFAR100,
        }
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self.source {
            DataSource::Synthetic => (self.synthetic_size, self.synthetic_size, 3),
            _ => (32, 32, 3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Per-class capacity of the feature and embedding queues.
    pub capacity: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { capacity: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_u: f64,
    pub lambda_align: f64,
    pub lambda_c: f64,
    /// Contrastive temperature t.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_u: 1.0,
            lambda_align: 1.0,
            lambda_c: 1.0,
            temperature: 0.07,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub pipeline: Pipeline,
    pub total_iters: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Batches prepared ahead on a background thread (0 = inline).
    pub prefetch: usize,
    /// Write a checkpoint at every evaluation.
    pub checkpoint: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::Claf,
            total_iters: 250_000,
            labeled_batch: 64,
            unlabeled_batch: 128,
            prefetch: 2,
            checkpoint: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub interval: usize,
    /// Number of trailing evaluations whose median is the final score.
    pub window: usize,
    pub tail_k: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 500,
            window: 20,
            tail_k: 3,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentPolicy,
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub pseudo_label: PseudoLabelConfig,
    pub fa: FaConfig,
    pub loss: LossConfig,
    pub optim: SgdConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ClafError::Config(format!("{name} must be finite and non-negative, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.split_spec(self.seed).validate()?;
        if let Some(v) = self.data.source.cifar_variant() {
            if v.num_classes() != self.data.num_classes {
                return Err(ClafError::Config(format!(
                    "data.num_classes = {} but {:?} has {} classes",
                    self.data.num_classes,
                    v,
                    v.num_classes()
                )));
            }
        }
        self.model.validate()?;
        self.pseudo_label.validate()?;
        self.fa.validate()?;
        if self.memory.capacity == 0 {
            return Err(ClafError::Config("memory.capacity must be positive".into()));
        }
        non_negative("loss.lambda_u", self.loss.lambda_u)?;
        non_negative("loss.lambda_align", self.loss.lambda_align)?;
        non_negative("loss.lambda_c", self.loss.lambda_c)?;
        if !(self.loss.temperature > 0.0) {
            return Err(ClafError::Config("loss.temperature must be positive".into()));
        }
        if self.trainer.total_iters == 0 || self.trainer.labeled_batch == 0 {
            return Err(ClafError::Config(
                "trainer.total_iters and trainer.labeled_batch must be positive".into(),
            ));
        }
        if self.eval.interval == 0 || self.eval.window == 0 {
            return Err(ClafError::Config("eval.interval and eval.window must be positive".into()));
        }
        non_negative("optim.lr", self.optim.lr)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ClafError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| ClafError::Config(e.to_string()))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Sets one field addressed by a dotted key, e.g. `fa.mu=0.9`. The value
    /// is parsed as a TOML literal, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| ClafError::Config(format!("unknown config key `{key}`")))?;
        }
        if slot.is_object() {
            return Err(ClafError::Config(format!("`{key}` is a section, not a field")));
        }
        *slot = parse_literal(value)?;
        *self = serde_json::from_value(root).map_err(|e| ClafError::Config(format!("{key}={value}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ClafError::Config(format!("override `{o}` is not of the form key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoFa => self.fa.start_fraction = 1.0,
            Ablation::NoContrastive => self.loss.lambda_c = 0.0,
        }
    }
}

fn parse_literal(value: &str) -> Result<serde_json::Value> {
    #[derive(Deserialize)]
    struct Wrapper {
        v: toml::Value,
    }
    match toml::from_str::<Wrapper>(&format!("v = {value}")) {
        Ok(w) => Ok(serde_json::to_value(w.v)?),
        Err(_) => Ok(serde_json::Value::String(value.to_string())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Feature augmentation never activates.
    NoFa,
    /// Contrastive weight set to zero.
    NoContrastive,
}

impl FromStr for Ablation {
    type Err = ClafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-fa" => Ok(Ablation::NoFa),
            "no-contrastive" => Ok(Ablation::NoContrastive),
            other => Err(ClafError::Config(format!(
                "unknown ablation `{other}` (expected no-fa or no-contrastive)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::NoFa => "no-fa",
            Ablation::NoContrastive => "no-contrastive",
        })
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 10] = [
    "cifar10lt-g100-n500",
    "cifar10lt-g100-n1500",
    "cifar10lt-g150-n500",
    "cifar10lt-g150-n1500",
    "cifar100lt-g10-n50",
    "cifar100lt-g10-n150",
    "cifar100lt-g20-n50",
    "cifar100lt-g20-n150",
    "desk-synthetic4",
    "desk-cifar10lt",
];

fn cifar(source: DataSource, gamma: f64, n1: usize, m1: usize) -> RunConfig {
    let num_classes = source.cifar_variant().map_or(10, CifarVariant::num_classes);
    RunConfig {
        data: DataConfig {
            source,
            num_classes,
            labeled_head: n1,
            unlabeled_head: m1,
            imbalance_ratio: gamma,
            ..Default::default()
        },
        model: ModelConfig {
            backbone: BackboneKind::Wrn28x2,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Built-in configurations. `claf-` prefixed aliases are accepted, and
/// `cifar10lt-g100` / `cifar10lt-g150` / `cifar100lt-g10` / `cifar100lt-g20`
/// default to the smaller labeled head.
pub fn preset(name: &str) -> Result<RunConfig> {
    let name = name.strip_prefix("claf-").unwrap_or(name);
    let cfg = match name {
        "cifar10lt-g100" | "cifar10lt-g100-n500" => cifar(DataSource::Cifar10, 100.0, 500, 4000),
        "cifar10lt-g100-n1500" => cifar(DataSource::Cifar10, 100.0, 1500, 3000),
        "cifar10lt-g150" | "cifar10lt-g150-n500" => cifar(DataSource::Cifar10, 150.0, 500, 4000),
        "cifar10lt-g150-n1500" => cifar(DataSource::Cifar10, 150.0, 1500, 3000),
        "cifar100lt-g10" | "cifar100lt-g10-n50" => cifar(DataSource::Cifar100, 10.0, 50, 400),
        "cifar100lt-g10-n150" => cifar(DataSource::Cifar100, 10.0, 150, 300),
        "cifar100lt-g20" | "cifar100lt-g20-n50" => cifar(DataSource::Cifar100, 20.0, 50, 400),
        "cifar100lt-g20-n150" => cifar(DataSource::Cifar100, 20.0, 150, 300),
        "desk-synthetic4" => RunConfig {
            data: DataConfig {
                source: DataSource::Synthetic,
                num_classes: 4,
                labeled_head: 200,
                unlabeled_head: 800,
                imbalance_ratio: 10.0,
                synthetic_train_per_class: 1000,
                synthetic_test_per_class: 250,
                ..Default::default()
            },
            model: ModelConfig::default(),
            memory: MemoryConfig { capacity: 64 },
            trainer: TrainerConfig {
                total_iters: 5000,
                labeled_batch: 16,
                unlabeled_batch: 32,
                ..Default::default()
            },
            eval: EvalConfig {
                interval: 250,
                ..Default::default()
            },
            ..Default::default()
        },
        "desk-cifar10lt" => {
            let mut c = cifar(DataSource::Cifar10, 50.0, 150, 1200);
            c.model.backbone = BackboneKind::SmallCnn;
            c.memory.capacity = 64;
            c.trainer = TrainerConfig {
                total_iters: 15_000,
                labeled_batch: 32,
                unlabeled_batch: 64,
                ..Default::default()
            };
            c
        }
        other => {
            return Err(ClafError::Config(format!(
                "unknown preset `{other}`; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}
