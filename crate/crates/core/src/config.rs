//! Named model presets and the JSON run-configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub periods: &'static [u64],
    pub slot_dim: usize,
    pub embed_dim: usize,
}

pub const PRESETS: [Preset; 4] = [
    Preset { name: "amazon", periods: &[1, 2, 4], slot_dim: 32, embed_dim: 16 },
    Preset { name: "taobao", periods: &[1, 2, 4, 12], slot_dim: 32, embed_dim: 16 },
    Preset { name: "xlong", periods: &[1, 2, 4, 8, 16, 32], slot_dim: 32, embed_dim: 16 },
    Preset { name: "small", periods: &[1, 2, 4], slot_dim: 8, embed_dim: 8 },
];

impl Preset {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { embed_dim: self.embed_dim, slot_dim: self.slot_dim, periods: self.periods.to_vec() }
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    PRESETS.iter().find(|p| p.name == name).copied().ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        Error::Invalid(format!("unknown preset {name:?}; expected one of {}", names.join(", ")))
    })
}

/// Synthetic generator settings used for the learning benchmarks: categories
/// double as items and the side, user-side and context fields are constant.
pub fn synthetic_preset(seed: u64) -> SynthConfig {
    SynthConfig {
        n_users: 1000,
        seq_len: 100,
        n_items: 6,
        n_cats: 6,
        n_side: 2,
        n_user_side: 2,
        n_context: 2,
        seed,
        ..Default::default()
    }
}

/// Values read from a config file or command-line flags. Unset fields fall
/// back to the preset and then to the training defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub periods: Option<Vec<u64>>,
    pub slot_dim: Option<usize>,
    pub embed_dim: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
    }

    /// `self` with every field set in `flags` replaced.
    pub fn overridden_by(self, flags: RunConfig) -> RunConfig {
        RunConfig {
            preset: flags.preset.or(self.preset),
            periods: flags.periods.or(self.periods),
            slot_dim: flags.slot_dim.or(self.slot_dim),
            embed_dim: flags.embed_dim.or(self.embed_dim),
            learning_rate: flags.learning_rate.or(self.learning_rate),
            lambda: flags.lambda.or(self.lambda),
            mu: flags.mu.or(self.mu),
            batch_size: flags.batch_size.or(self.batch_size),
            epochs: flags.epochs.or(self.epochs),
            seed: flags.seed.or(self.seed),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = preset(self.preset.as_deref().unwrap_or("amazon"))?.model_config();
        let cfg = ModelConfig {
            embed_dim: self.embed_dim.unwrap_or(base.embed_dim),
            slot_dim: self.slot_dim.unwrap_or(base.slot_dim),
            periods: self.periods.clone().unwrap_or(base.periods),
        };
        crate::hpmn::UpdateSchedule::new(cfg.periods.clone())?;
        if cfg.embed_dim == 0 || cfg.slot_dim == 0 {
            return Err(Error::Invalid("embedding and slot dimensions must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            lambda: self.lambda.unwrap_or(d.lambda),
            mu: self.mu.unwrap_or(d.mu),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed: self.seed.unwrap_or(d.seed),
            model: self.model_config()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
