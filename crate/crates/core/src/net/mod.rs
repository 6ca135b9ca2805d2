//! The denoiser: a small DiT backbone over patchified latent tokens, a
//! ControlNet branch copied from its first blocks, the control feature
//! projector, and the per-block dual-branch connectors.
//!
//! Token order is frame-major then row-major over the patch grid; inside a
//! token the patch values are laid out channel, then row, then column.

mod blocks;
mod control;
mod layers;
mod model;
mod params;
mod tokens;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use blocks::{dit_forward, Injection};
pub use control::{connector_fuse, control_projector, controlnet_init_from_dit, init_control, routed_block};
pub use model::{backbone_forward, init_backbone, v_theta_forward, Conditioning, VTheta};
pub use params::{Bound, Param, ParamStore, Partition};
pub use tokens::{patchify, sinusoidal_features, timestep_embed, unpatchify, CaptionTokens, PatchGrid, VisualTokens};

/// Width and depth of the denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// DiT block count; must be a multiple of 6.
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Spatial patch edge; the temporal patch is always 1.
    pub patch: usize,
    /// Latent channels (12 for RGB clips under the f=2 codec).
    pub latent_channels: usize,
    pub caption_vocab: usize,
    pub caption_len: usize,
    /// Extents of the learned positional tables.
    pub max_frames: usize,
    pub max_grid: usize,
    pub mlp_ratio: usize,
    /// Hidden channels inside each projector residual block.
    pub projector_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            hidden: 64,
            heads: 4,
            patch: 2,
            latent_channels: 12,
            caption_vocab: 64,
            caption_len: 8,
            max_frames: 16,
            max_grid: 16,
            mlp_ratio: 4,
            projector_width: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("net.depth", self.depth),
            ("net.hidden", self.hidden),
            ("net.heads", self.heads),
            ("net.patch", self.patch),
            ("net.latent_channels", self.latent_channels),
            ("net.caption_vocab", self.caption_vocab),
            ("net.caption_len", self.caption_len),
            ("net.max_frames", self.max_frames),
            ("net.max_grid", self.max_grid),
            ("net.mlp_ratio", self.mlp_ratio),
            ("net.projector_width", self.projector_width),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*field, "must be positive"));
        }
        if !self.depth.is_multiple_of(6) {
            return Err(Error::config("net.depth", format!("{} is not a multiple of 6", self.depth)));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(
                "net.heads",
                format!("hidden {} is not divisible by {} heads", self.hidden, self.heads),
            ));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(Error::config("net.hidden", "must be even for sinusoidal features"));
        }
        if self.caption_vocab < 2 {
            return Err(Error::config("net.caption_vocab", "needs padding id 0 plus at least one word"));
        }
        Ok(())
    }

    pub fn controlnet_blocks(&self) -> usize {
        self.depth / 6
    }

    /// Values per token before embedding.
    pub fn patch_dim(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectorMode {
    #[default]
    Dual,
    MlpOnly,
    CaOnly,
}

impl ConnectorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConnectorMode::Dual => "dual",
            ConnectorMode::MlpOnly => "mlp_only",
            ConnectorMode::CaOnly => "ca_only",
        }
    }

    pub fn uses_mlp(self) -> bool {
        self != ConnectorMode::CaOnly
    }

    pub fn uses_ca(self) -> bool {
        self != ConnectorMode::MlpOnly
    }
}

impl std::str::FromStr for ConnectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(ConnectorMode::Dual),
            "mlp_only" => Ok(ConnectorMode::MlpOnly),
            "ca_only" => Ok(ConnectorMode::CaOnly),
            other => Err(Error::config("connector_mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Architectural switches for the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub projector_on: bool,
    pub connector_mode: ConnectorMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { projector_on: true, connector_mode: ConnectorMode::Dual }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;
