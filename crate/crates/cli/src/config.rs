//! Training configuration files.
//!
//! ```toml
//! [run]
//! seed = 7
//! out_dir = "runs/b"
//!
//! [space]
//! layers = 4
//! base_channels = 8
//!
//! [data]
//! image_size = 64
//! classes = 4
//! batch = 4
//!
//! [train]
//! budget = "B"
//! max_iter = 500
//! ```
//!
//! Every section and key is optional; unknown ones are rejected.

use std::path::PathBuf;

use dynroute_core::trainer::{BudgetPreset, TrainConfig};
use dynroute_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub space: SpaceSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Write a checkpoint every this many iterations (and at the end).
    pub checkpoint_every: Option<u64>,
    /// Images pushed through the trained network for the route log.
    pub route_samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    pub layers: Option<usize>,
    pub base_channels: Option<usize>,
    pub gate_downsample: Option<bool>,
    /// Preset name or mask file (relative to the config file). Trains that
    /// static architecture with frozen gates.
    pub mask: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub image_size: Option<usize>,
    pub classes: Option<usize>,
    pub batch: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub budget: Option<String>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub mu: Option<f64>,
    pub base_lr: Option<f64>,
    pub power: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub max_iter: Option<u64>,
}

pub const DEFAULT_CHECKPOINT_EVERY: u64 = 100;
pub const DEFAULT_ROUTE_SAMPLES: usize = 32;

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let start = e.span().map_or(0, |s| s.start.min(text.len()));
            let line = text[..start].matches('\n').count() + 1;
            Error::Parse { line, msg: e.message().to_string() }
        })
    }

    pub fn train_config(&self, seed_override: Option<u64>) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        let t = &self.train;
        if let Some(name) = &t.budget {
            if t.lambda2.is_some() || t.mu.is_some() {
                return Err(Error::Validation("set either train.budget or train.lambda2/train.mu, not both".into()));
            }
            c = c.with_budget(name.parse::<BudgetPreset>().map_err(|e| Error::Validation(e.to_string()))?);
        }
        macro_rules! set {
            ($src:expr => $dst:ident) => {
                if let Some(v) = $src {
                    c.$dst = v;
                }
            };
        }
        set!(t.lambda1 => lambda1);
        set!(t.lambda2 => lambda2);
        set!(t.mu => mu);
        set!(t.base_lr => base_lr);
        set!(t.power => power);
        set!(t.momentum => momentum);
        set!(t.weight_decay => weight_decay);
        set!(t.max_iter => max_iter);
        set!(self.space.layers => layers);
        set!(self.space.base_channels => base_channels);
        set!(self.space.gate_downsample => gate_downsample);
        set!(self.data.image_size => image_size);
        set!(self.data.classes => classes);
        set!(self.data.batch => batch);
        set!(seed_override.or(self.run.seed) => seed);
        c.validate()?;
        Ok(c)
    }
}
