//! Experiment configuration: one JSON document with `model`, `train`, `data`
//! and `eval` sections. Unknown keys are rejected. Individual fields can be
//! overridden with dotted paths such as `train.base_lr=0.02`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::data::{generate_synth_dataset, load_dataset, Dataset, SynthSpec};
use crate::error::{DcaError, Result};
use crate::network::ModelConfig;
use crate::structures::StructureKind;
use crate::train::{ClassBalance, TrainConfig};

pub const RESOLVED_CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: SynthSpec,
    pub val: SynthSpec,
    /// Load the training split from a dataset directory instead of generating it.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: SynthSpec { num_images: 200, seed: 0, ..SynthSpec::default() },
            val: SynthSpec { num_images: 50, seed: 1, ..SynthSpec::default() },
            train_dir: None,
            val_dir: None,
        }
    }
}

impl DataConfig {
    pub fn train_set(&self) -> Result<Dataset> {
        match &self.train_dir {
            Some(dir) => load_dataset(dir),
            None => generate_synth_dataset(&self.train),
        }
    }

    pub fn val_set(&self) -> Result<Dataset> {
        match &self.val_dir {
            Some(dir) => load_dataset(dir),
            None => generate_synth_dataset(&self.val),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Input scales averaged at inference; `[1.0]` is single-scale.
    pub scales: Vec<f64>,
    pub batch_size: usize,
    /// Also write predicted label maps as indexed PNGs.
    pub save_predictions: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { scales: vec![1.0], batch_size: 10, save_predictions: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    /// The desk-scale recipe used by the ordering study: reference loss weights,
    /// momentum, weight decay and poly power, with a learning rate, batch size
    /// and class weighting suited to training from scratch on the synthetic set.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig {
                base_lr: 0.05,
                batch_size: 4,
                class_balance: ClassBalance::Uniform,
                augment: AugmentConfig::default(),
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a JSON document. Errors name the offending line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| DcaError::Config {
            field: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, e: DcaError| DcaError::Config { field: f.into(), message: e.to_string() };
        self.train.validate().map_err(|e| field("train", e))?;
        self.data.train.validate().map_err(|e| field("data.train", e))?;
        self.data.val.validate().map_err(|e| field("data.val", e))?;
        if self.data.train_dir.is_none() && self.data.train.num_classes != self.model.num_classes {
            return Err(DcaError::Config {
                field: "data.train.num_classes".into(),
                message: format!("{} differs from model.num_classes {}", self.data.train.num_classes, self.model.num_classes),
            });
        }
        if self.eval.scales.is_empty() || self.eval.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(DcaError::Config { field: "eval.scales".into(), message: "need one or more positive scales".into() });
        }
        if self.eval.batch_size == 0 {
            return Err(DcaError::Config { field: "eval.batch_size".into(), message: "must be positive".into() });
        }
        Ok(())
    }

    /// Applies `path=value` overrides. The value is parsed as JSON when it
    /// parses, otherwise taken as a string, so `model.structure.kind=pyramid`
    /// and `train.base_lr=0.02` both work. Paths must name existing fields.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o.split_once('=').ok_or_else(|| DcaError::Config {
                field: o.into(),
                message: "expected `path=value`".into(),
            })?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            set_path(&mut doc, path, value)?;
        }
        let cfg: Self = serde_json::from_value(doc)
            .map_err(|e| DcaError::Config { field: "override".into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the seed used for initialization, shuffling and augmentation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    pub fn with_structure(mut self, kind: StructureKind) -> Self {
        self.model.structure.kind = kind;
        self
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        crate::checkpoint::digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let unknown = || DcaError::Config { field: path.into(), message: "no such field".into() };
    let mut node = doc;
    let mut keys = path.split('.').peekable();
    while let Some(key) = keys.next() {
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        if keys.peek().is_none() {
            if !obj.contains_key(key) {
                return Err(unknown());
            }
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(key).ok_or_else(unknown)?;
    }
    Err(unknown())
}
