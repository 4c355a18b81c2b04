//! Flat `key = value` run configuration.
//!
//! ```text
//! # tiny smoke-test model
//! layers = 2
//! hidden_dim = 16
//! weight.btsp = 10
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown keys and repeated keys
//! are errors. Values given on the command line are applied afterwards with
//! the same parser, so they override the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::CliError;
use crate::model::{CouplingMode, ModelConfig};
use crate::objectives::Objective;
use crate::tokenizer::DEFAULT_VOCAB_SIZE;
use crate::trainer::{OptimizerKind, TrainConfig};

/// Every key, in snapshot order.
pub const KEYS: &[&str] = &[
    "layers",
    "hidden_dim",
    "heads",
    "ffn_dim",
    "dropout",
    "max_seq_len",
    "coupling",
    "vocab_size",
    "min_freq",
    "epochs",
    "batch_size",
    "lr",
    "decay",
    "seed",
    "clip_norm",
    "optimizer",
    "static_masks",
    "weight.mlm",
    "weight.spp",
    "weight.btsp",
    "weight.biltm",
    "weight.tlc",
    "weight.cmi",
];

const MODEL_KEYS: &[&str] = &["layers", "hidden_dim", "heads", "ffn_dim", "dropout", "max_seq_len", "coupling"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Vocabulary sizes are filled in once the vocabulary is known.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_size: usize,
    pub min_freq: usize,
    /// Keys that came from the file or the command line.
    pub explicit: Vec<String>,
}

impl RunConfig {
    pub fn pretrain_defaults() -> Self {
        Self {
            model: ModelConfig::base(),
            train: TrainConfig::pretrain_defaults(),
            vocab_size: DEFAULT_VOCAB_SIZE,
            min_freq: 2,
            explicit: Vec::new(),
        }
    }

    pub fn finetune_defaults() -> Self {
        Self { train: TrainConfig::finetune_defaults(), ..Self::pretrain_defaults() }
    }

    pub fn load(path: &Path, defaults: Self) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = defaults;
        cfg.apply_text(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(format!("line {}: `{key}` given twice", n + 1));
            }
            seen.push(key);
            self.set(key, value.trim()).map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("`{key}`: cannot parse `{value}`"))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "layers" => m.num_layers = parse(key, value)?,
            "hidden_dim" => m.hidden_dim = parse(key, value)?,
            "heads" => m.num_heads = parse(key, value)?,
            "ffn_dim" => m.ffn_dim = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "max_seq_len" => m.max_seq_len = parse(key, value)?,
            "coupling" => m.coupling = value.parse::<CouplingMode>().map_err(|e| e.to_string())?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "min_freq" => self.min_freq = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.initial_lr = parse(key, value)?,
            "decay" => t.decay = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "optimizer" => t.optimizer = value.parse::<OptimizerKind>().map_err(|e| e.to_string())?,
            "static_masks" => t.static_masks = parse(key, value)?,
            _ => match key.strip_prefix("weight.") {
                Some(name) => {
                    let o: Objective = name.parse().map_err(|e: crate::objectives::ObjectiveError| e.to_string())?;
                    t.weights.set(o, parse(key, value)?);
                }
                None => return Err(format!("unknown key `{key}`")),
            },
        }
        if !self.explicit.iter().any(|k| k == key) {
            self.explicit.push(key.to_string());
        }
        Ok(())
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("override `{item}` is not key=value")))?;
            self.set(k.trim(), v.trim()).map_err(CliError::Validation)?;
        }
        Ok(())
    }

    /// Keeps only the listed objectives switched on.
    pub fn restrict_objectives(&mut self, keep: &[Objective]) -> Result<(), CliError> {
        for o in Objective::ALL {
            if !keep.contains(&o) {
                self.train.weights.set(o, 0.0);
            } else if !self.train.weights.enabled(o) {
                return Err(CliError::Validation(format!("objective {o} requested but weight.{o} is 0")));
            }
        }
        Ok(())
    }

    pub fn model_keys_set(&self) -> Vec<&str> {
        self.explicit.iter().map(String::as_str).filter(|k| MODEL_KEYS.contains(k)).collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        let v = match key {
            "layers" => m.num_layers.to_string(),
            "hidden_dim" => m.hidden_dim.to_string(),
            "heads" => m.num_heads.to_string(),
            "ffn_dim" => m.ffn_dim.to_string(),
            "dropout" => m.dropout.to_string(),
            "max_seq_len" => m.max_seq_len.to_string(),
            "coupling" => m.coupling.short_name().to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "min_freq" => self.min_freq.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.initial_lr.to_string(),
            "decay" => t.decay.to_string(),
            "seed" => t.seed.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "optimizer" => t.optimizer.to_string(),
            "static_masks" => t.static_masks.to_string(),
            _ => t.weights.get(key.strip_prefix("weight.")?.parse().ok()?).to_string(),
        };
        Some(v)
    }

    pub fn snapshot(&self) -> BTreeMap<String, String> {
        KEYS.iter().filter_map(|k| Some((k.to_string(), self.get(k)?))).collect()
    }

    /// Same snapshot restricted to the given keys.
    pub fn snapshot_of(&self, keys: &[&str]) -> BTreeMap<String, String> {
        keys.iter().filter_map(|k| Some((k.to_string(), self.get(k)?))).collect()
    }
}

/// Keys that affect training but not the model shape.
pub fn training_keys() -> Vec<&'static str> {
    KEYS.iter().copied().filter(|k| !MODEL_KEYS.contains(k) && *k != "vocab_size" && *k != "min_freq").collect()
}
