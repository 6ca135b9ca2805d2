use crate::codec::LatentVideo;
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::schedule::TimeStep;
use crate::tensor::{Graph, Var};

use super::blocks::{block_forward, dit_forward, init_block, Injection};
use super::control::control_projector;
use super::layers::linear;
use super::params::{Bound, Init, ParamStore};
use super::tokens::{caption_context, patchify, positional, timestep_embed, unpatchify, CaptionTokens};
use super::{Ablation, NetConfig};

/// Whether the control path takes part in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a> {
    Backbone,
    Control { z_lq: &'a LatentVideo, ablation: Ablation },
}

/// Random backbone: patch embedding, positional/caption/timestep
/// embeddings, `depth` blocks and a zero-initialized output head.
pub fn init_backbone(cfg: &NetConfig, seed: SeedStream) -> Result<ParamStore> {
    cfg.validate()?;
    let init = Init::new(seed.derive("backbone-init"));
    let mut s = ParamStore::new();
    let d = cfg.hidden;
    init.linear(&mut s, "embed.patch", cfg.patch_dim(), d)?;
    for (name, rows) in
        [("embed.pos_frame", cfg.max_frames), ("embed.pos_row", cfg.max_grid), ("embed.pos_col", cfg.max_grid)]
    {
        s.insert(name, init.normal(name, &[rows, d], 0.2))?;
    }
    s.insert("embed.caption", init.normal("embed.caption", &[cfg.caption_vocab, d], 1.0))?;
    init.linear(&mut s, "embed.time.fc1", d, d)?;
    init.linear(&mut s, "embed.time.fc2", d, d)?;
    for i in 0..cfg.depth {
        init_block(&init, &mut s, &format!("dit.{i}"), cfg)?;
    }
    init.layer_norm(&mut s, "head.ln", d)?;
    init.zero_linear(&mut s, "head", d, cfg.patch_dim())?;
    Ok(s)
}

fn check_latent(cfg: &NetConfig, what: &'static str, z: &LatentVideo) -> Result<()> {
    let [_, c, h, w] = z.shape();
    if c != cfg.latent_channels || h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::invalid(
            what,
            format!(
                "latent {:?} needs {} channels and extents divisible by {}",
                z.shape(),
                cfg.latent_channels,
                cfg.patch
            ),
        ));
    }
    Ok(())
}

/// The velocity prediction `v_theta(x_t, z_lq, caption, t)` as a graph node
/// of latent shape `[F, C, H, W]`.
pub fn v_theta_forward<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    cfg: &NetConfig,
    x_t: &LatentVideo,
    caption: &CaptionTokens,
    t: TimeStep,
    cond: Conditioning<'_>,
) -> Result<Var<'g>> {
    check_latent(cfg, "x_t", x_t)?;
    let x = patchify(g.constant(x_t.tensor().clone())?, cfg)?;
    let pos = positional(g, p, x.grid, cfg)?;
    let temb = timestep_embed(g, p, t, cfg)?;
    let x_in = linear(p, "embed.patch", x.tokens)?.add(&pos)?.add(&temb)?;
    let (ctx, mask) = caption_context(g, p, caption, cfg)?;

    let out = match cond {
        Conditioning::Backbone => dit_forward(p, cfg, x_in, ctx, &mask, Injection::None)?,
        Conditioning::Control { z_lq, ablation } => {
            if z_lq.shape() != x_t.shape() {
                return Err(Error::invalid(
                    "v_theta_forward",
                    format!("z_lq {:?} differs from x_t {:?}", z_lq.shape(), x_t.shape()),
                ));
            }
            let mut zc = g.constant(z_lq.tensor().clone())?;
            if ablation.projector_on {
                zc = control_projector(p, zc)?;
            }
            let c_tok = patchify(zc, cfg)?;
            let mut c = linear(p, "controlnet.patch", c_tok.tokens)?.add(&x_in)?;
            let mut control = Vec::with_capacity(cfg.controlnet_blocks());
            for k in 0..cfg.controlnet_blocks() {
                c = block_forward(p, &format!("controlnet.{k}"), c, ctx, &mask, cfg.heads)?;
                control.push(c);
            }
            let inj = Injection::Connectors { control: &control, mode: ablation.connector_mode };
            dit_forward(p, cfg, x_in, ctx, &mask, inj)?
        }
    };
    unpatchify(&x.with_tokens(out), cfg)
}

/// [`v_theta_forward`] without the control path.
pub fn backbone_forward<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    cfg: &NetConfig,
    x_t: &LatentVideo,
    caption: &CaptionTokens,
    t: TimeStep,
) -> Result<Var<'g>> {
    v_theta_forward(g, p, cfg, x_t, caption, t, Conditioning::Backbone)
}

/// Inference-only view of a parameter set.
#[derive(Clone, Copy)]
pub struct VTheta<'a> {
    pub cfg: &'a NetConfig,
    pub params: &'a ParamStore,
}

impl<'a> VTheta<'a> {
    pub fn new(cfg: &'a NetConfig, params: &'a ParamStore) -> Self {
        Self { cfg, params }
    }

    pub fn predict(
        &self,
        x_t: &LatentVideo,
        caption: &CaptionTokens,
        t: TimeStep,
        cond: Conditioning<'_>,
    ) -> Result<LatentVideo> {
        let g = Graph::new();
        let p = self.params.bind(&g, |_, _| false)?;
        let v = v_theta_forward(&g, &p, self.cfg, x_t, caption, t, cond)?;
        LatentVideo::new(v.value())
    }
}
