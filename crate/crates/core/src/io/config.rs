//! The run configuration document and its canonical hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{vocab, DataConfig};
use crate::degrade::DegradationConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::pipeline::TrainConfig;
use crate::restore::RESTORE_STEPS;
use crate::schedule::ScheduleConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct TrainSection {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreConfig {
    pub steps: usize,
    /// Latent tile size; `None` restores whole frames.
    pub tile: Option<usize>,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self { steps: RESTORE_STEPS, tile: None }
    }
}

/// Every knob of a run. Missing fields take their defaults; unknown
/// fields are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub degrade: DegradationConfig,
    pub data: DataConfig,
    pub distill: DistillConfig,
    pub train: TrainSection,
    pub restore: RestoreConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config { field, msg } => Error::config(field, format!("{} ({})", msg, path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.build()?;
        self.net.validate()?;
        self.degrade.validate()?;
        self.data.validate()?;
        self.distill.validate(&schedule)?;
        self.train.pretrain.validate(&self.net)?;
        self.train.finetune.validate(&self.net)?;
        if self.net.caption_len < vocab::WORDS || self.net.caption_vocab < vocab::SIZE as usize {
            return Err(Error::config(
                "net.caption_len",
                format!("captions need length >= {} and vocabulary >= {}", vocab::WORDS, vocab::SIZE),
            ));
        }
        if self.data.max_frames > self.net.max_frames {
            return Err(Error::config("data.max_frames", "exceeds net.max_frames"));
        }
        let patch_px = 2 * self.net.patch;
        if !self.data.height.is_multiple_of(patch_px) || !self.data.width.is_multiple_of(patch_px) {
            return Err(Error::config("data.height", format!("extents must be multiples of {patch_px}")));
        }
        let grid_of = |px: usize| px / patch_px;
        for (field, px) in [
            ("train.pretrain.crop", self.train.pretrain.crop.unwrap_or(self.data.height.max(self.data.width))),
            ("train.finetune.crop", self.train.finetune.crop.unwrap_or(self.data.height.max(self.data.width))),
        ] {
            if grid_of(px) > self.net.max_grid {
                return Err(Error::config(
                    field,
                    format!("{px} px exceeds the positional table of {}", self.net.max_grid),
                ));
            }
        }
        if let Some(t) = self.restore.tile {
            if t == 0 || t % self.net.patch != 0 || t / self.net.patch > self.net.max_grid {
                return Err(Error::config("restore.tile", "must be a positive patch multiple within net.max_grid"));
            }
        }
        if self.restore.steps == 0 || self.restore.steps > schedule.len() {
            return Err(Error::config("restore.steps", format!("must lie in [1, {}]", schedule.len())));
        }
        Ok(())
    }

    /// Sorted-key JSON of the fully defaulted document.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("config serializes").to_string()
    }

    /// SHA-256 of [`RunConfig::canonical_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
