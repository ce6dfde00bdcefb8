//! JSON run configs. `model` and `train` sections start from a named
//! preset (`"preset": "desk"`) and override individual fields.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{Script, Task};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{ScalesConfig, TrainConfig};

pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub task: Task,
    pub script: Script,
    pub train_size: usize,
    pub valid_size: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Either four corpus files or a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
    /// Longest pair kept, in bytes including bos and eos.
    pub max_len: Option<usize>,
}

impl DataConfig {
    pub fn files(&self) -> Option<[&Path; 4]> {
        match (
            &self.train_src,
            &self.train_tgt,
            &self.valid_src,
            &self.valid_tgt,
        ) {
            (Some(a), Some(b), Some(c), Some(d)) => Some([a, b, c, d]),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let any_file = self.train_src.is_some()
            || self.train_tgt.is_some()
            || self.valid_src.is_some()
            || self.valid_tgt.is_some();
        match (any_file, &self.synthetic) {
            (true, Some(_)) => Err(Error::Config(
                "data: give either corpus files or synthetic, not both".into(),
            )),
            (false, None) => Err(Error::Config(
                "data: give corpus files or a synthetic task".into(),
            )),
            (true, None) if self.files().is_none() => Err(Error::Config(
                "data: train_src, train_tgt, valid_src and valid_tgt are all required".into(),
            )),
            (false, Some(s)) if s.train_size == 0 || s.valid_size == 0 => Err(Error::Config(
                "data.synthetic: sizes must be positive".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn as_object<'a>(value: &'a Value, what: &str) -> Result<&'a Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| Error::Config(format!("{what} must be a JSON object")))
}

/// Replaces fields of `base` with those of `section`. Keys that `base`
/// does not have are rejected.
fn overlay(
    base: &mut Value,
    section: &Map<String, Value>,
    what: &str,
    skip: &[&str],
) -> Result<()> {
    let obj = base.as_object_mut().expect("configs serialize to objects");
    for (k, v) in section {
        if skip.contains(&k.as_str()) {
            continue;
        }
        match obj.get_mut(k) {
            Some(slot) => *slot = v.clone(),
            None => return Err(Error::Config(format!("unknown key {what}.{k}"))),
        }
    }
    Ok(())
}

fn preset_section<T, P>(
    section: Option<&Value>,
    what: &str,
    default_preset: &str,
    preset: P,
) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    P: Fn(&str) -> Result<T>,
{
    let empty = Map::new();
    let section = match section {
        Some(v) => as_object(v, what)?,
        None => &empty,
    };
    let name = match section.get("preset") {
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(Error::Config(format!("{what}.preset must be a string"))),
        None => default_preset,
    };
    let mut base = serde_json::to_value(preset(name)?)?;
    overlay(&mut base, section, what, &["preset"])?;
    serde_json::from_value(base).map_err(|e| Error::Config(format!("{what}: {e}")))
}

fn seed_of(root: &Map<String, Value>, flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match root.get("seed") {
        None => Ok(DEFAULT_SEED),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| Error::Config(format!("seed must be a non-negative integer, got {v}"))),
    }
}

fn check_keys(root: &Map<String, Value>, allowed: &[&str]) -> Result<()> {
    match root.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::Config(format!("unknown top-level key {k:?}"))),
        None => Ok(()),
    }
}

/// Parses a training config. `seed_override` (flag or environment) beats
/// the file's `seed`; the seed drives initialization, batching and dropout.
pub fn train_config(value: &Value, seed_override: Option<u64>) -> Result<TrainRunConfig> {
    let root = as_object(value, "config")?;
    check_keys(root, &["seed", "model", "train", "data"])?;
    let seed = seed_of(root, seed_override)?;
    let model: ModelConfig =
        preset_section(root.get("model"), "model", "desk", ModelConfig::preset)?;
    let mut train: TrainConfig =
        preset_section(root.get("train"), "train", "desk", TrainConfig::preset)?;
    train.seed = seed;
    let data: DataConfig = match root.get("data") {
        Some(v) => {
            serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("data: {e}")))?
        }
        None => DataConfig::default(),
    };
    model.validate()?;
    train.validate()?;
    data.validate()?;
    Ok(TrainRunConfig {
        seed,
        model,
        train,
        data,
    })
}

/// Parses a scales config: `model` and `train` sections as for training
/// plus a `scales` section overriding the grid settings.
pub fn scales_config(value: &Value, seed_override: Option<u64>) -> Result<ScalesConfig> {
    let root = as_object(value, "config")?;
    check_keys(root, &["seed", "model", "train", "scales"])?;
    let defaults = ScalesConfig::default();
    let model: ModelConfig = match root.get("model") {
        Some(_) => preset_section(root.get("model"), "model", "desk", ModelConfig::preset)?,
        None => defaults.model.clone(),
    };
    let train: TrainConfig = match root.get("train") {
        Some(_) => preset_section(root.get("train"), "train", "desk", TrainConfig::preset)?,
        None => defaults.train.clone(),
    };
    let mut base = serde_json::to_value(&defaults)?;
    if let Some(section) = root.get("scales") {
        overlay(
            &mut base,
            as_object(section, "scales")?,
            "scales",
            &["model", "train", "seed"],
        )?;
    }
    let mut cfg: ScalesConfig =
        serde_json::from_value(base).map_err(|e| Error::Config(format!("scales: {e}")))?;
    cfg.model = model;
    cfg.train = train;
    cfg.seed = seed_of(root, seed_override)?;
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}
