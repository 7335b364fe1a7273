//! TOML configuration files.
//!
//! A training file has optional `[model]` and `[train]` tables. `[model]`
//! may name a `preset` (`"full"` or `"desk"`) whose values the remaining
//! keys override; unspecified keys fall back to the full-size defaults.
//!
//! ```toml
//! [model]
//! preset = "desk"
//! depth = 3
//!
//! [train]
//! batch_size = 4
//! epochs = 200
//! dpcl_mode = "multi-opposite"
//! ```

use std::path::Path;

use eendcd_core::model::ModelConfig;
use eendcd_core::pipeline::{MixtureSpec, TrainConfig};
use serde::Deserialize;

use crate::error::{Error, Result};

/// Environment variable overriding the training seed.
pub const SEED_ENV: &str = "EENDCD_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn preset(name: &str) -> Option<ModelConfig> {
    match name {
        "full" => Some(ModelConfig::default()),
        "desk" => Some(ModelConfig::desk()),
        _ => None,
    }
}

pub fn parse_run_config(text: &str, origin: &Path) -> Result<RunConfig> {
    let invalid = |d: String| Error::invalid(origin, d);
    let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
    if let Some(key) = root.keys().find(|k| *k != "model" && *k != "train") {
        return Err(invalid(format!("unknown table {key:?}")));
    }
    let model = match root.remove("model") {
        None => ModelConfig::default(),
        Some(toml::Value::Table(mut t)) => {
            let base = match t.remove("preset") {
                None => ModelConfig::default(),
                Some(toml::Value::String(name)) => {
                    preset(&name).ok_or_else(|| invalid(format!("unknown model preset {name:?}")))?
                }
                Some(v) => return Err(invalid(format!("preset must be a string, got {v}"))),
            };
            let mut merged = toml::Table::try_from(&base).map_err(|e| invalid(e.to_string()))?;
            merged.extend(t);
            ModelConfig::deserialize(merged).map_err(|e| invalid(format!("[model]: {e}")))?
        }
        Some(_) => return Err(invalid("[model] must be a table".into())),
    };
    let train = match root.remove("train") {
        None => TrainConfig::default(),
        Some(v) => TrainConfig::deserialize(v).map_err(|e| invalid(format!("[train]: {e}")))?,
    };
    model.validate()?;
    train.validate()?;
    Ok(RunConfig { model, train })
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_run_config(&text, path)
}

/// Applies [`SEED_ENV`] when set.
pub fn seed_override(cfg: &mut TrainConfig) -> std::result::Result<(), String> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            cfg.seed = v.trim().parse().map_err(|_| format!("{SEED_ENV}={v:?} is not an integer"))?;
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

/// A family of synthetic recordings with consecutive seeds.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSet {
    pub split: String,
    pub count: usize,
    pub n_speakers: usize,
    pub duration_s: f64,
    pub overlap_ratio: f64,
    pub noise_snr_db: f64,
    /// Seed of the first recording; the rest follow consecutively.
    pub seed: u64,
}

impl SynthSet {
    pub fn specs(&self) -> impl Iterator<Item = MixtureSpec> + '_ {
        (0..self.count as u64).map(|i| MixtureSpec {
            n_speakers: self.n_speakers,
            duration_s: self.duration_s,
            overlap_ratio: self.overlap_ratio,
            noise_snr_db: self.noise_snr_db,
            seed: self.seed + i,
        })
    }
}

/// Synthesis plan: a list of `[[set]]` tables.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPlan {
    pub set: Vec<SynthSet>,
}

pub fn parse_synth_plan(text: &str, origin: &Path) -> Result<SynthPlan> {
    let plan: SynthPlan = toml::from_str(text).map_err(|e| Error::invalid(origin, e.to_string()))?;
    let mut seeds: Vec<u64> = plan.set.iter().flat_map(|s| s.specs().map(|m| m.seed)).collect();
    seeds.sort_unstable();
    if let Some(w) = seeds.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(origin, format!("seed {} used twice", w[0])));
    }
    for s in &plan.set {
        if s.split.is_empty() || !s.split.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::invalid(origin, format!("invalid split name {:?}", s.split)));
        }
        for spec in s.specs().take(1) {
            spec.validate()?;
        }
    }
    Ok(plan)
}

pub fn load_synth_plan(path: impl AsRef<Path>) -> Result<SynthPlan> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_synth_plan(&text, path)
}
