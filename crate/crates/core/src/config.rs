//! Run configuration: model, training and data settings as one JSON
//! document, with dotted-key `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Root of a University-1652-style tree. Without it the synthetic
    /// generator runs in memory.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    /// Evaluate on the training locations (train UAV vs train satellite)
    /// instead of the test splits.
    #[serde(default)]
    pub eval_on_train: bool,
    /// Decode every image up front.
    #[serde(default = "default_true")]
    pub preload: bool,
    /// Training images used to estimate the input normalization; 0 keeps
    /// the configured constants.
    #[serde(default = "default_norm_samples")]
    pub normalization_samples: usize,
}

fn default_true() -> bool {
    true
}

fn default_norm_samples() -> usize {
    2000
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synthetic: SyntheticConfig::default(),
            eval_on_train: false,
            preload: true,
            normalization_samples: default_norm_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

/// Short names for frequently swept keys.
pub const ALIASES: &[(&str, &str)] = &[
    ("num_parts", "model.partition.num_parts"),
    ("strategy", "model.partition.strategy"),
    ("alpha", "model.partition.alpha"),
    ("beta", "model.partition.beta"),
    ("attention_grad", "model.partition.attention_grad"),
    ("additive_dim", "model.head.additive_dim"),
    ("margin", "model.head.margin"),
    ("epochs", "train.epochs"),
    ("batch_size", "train.batch_size"),
    ("max_steps", "train.max_steps"),
    ("lr_backbone", "train.base_lr_backbone"),
    ("lr_new", "train.base_lr_new"),
    ("seed", "train.seed"),
    ("locations", "data.synthetic.num_locations"),
    ("uav_views", "data.synthetic.uav_views_per_location"),
];

impl RunConfig {
    /// Overfit preset on the synthetic set: micro backbone, K=2 soft
    /// aggregation, 200 steps, evaluated on the training locations.
    pub fn overfit() -> Self {
        let mut cfg = RunConfig::default();
        cfg.data.eval_on_train = true;
        cfg.train.epochs = 40;
        cfg.train.max_steps = Some(200);
        cfg.train.eval_every = 0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `key=value` overrides in order. Keys are dotted paths into the
    /// JSON form (or an alias); values are parsed as JSON, falling back to a
    /// plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            let path = ALIASES
                .iter()
                .find(|(a, _)| *a == key)
                .map_or(key, |(_, full)| full);
            let value = serde_json::from_str::<Value>(raw.trim())
                .unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            set_path(&mut doc, path, value)
                .map_err(|why| Error::Config(format!("override `{o}`: {why}")))?;
        }
        serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> std::result::Result<(), String> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| format!("`{}` is not a section", parts[..i].join(".")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| format!("unknown key `{}`", parts[..=i].join(".")))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(format!("`{path}` is a section, not a value"));
            }
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err("empty key".into())
}
