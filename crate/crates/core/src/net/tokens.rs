use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::TimeStep;
use crate::tensor::{Graph, Tensor, Var};

use super::layers::mlp;
use super::params::Bound;
use super::NetConfig;

/// Patch-grid extents of a token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A `[tokens, width]` sequence plus the grid it came from.
#[derive(Clone, Copy)]
pub struct VisualTokens<'g> {
    pub tokens: Var<'g>,
    pub grid: PatchGrid,
}

impl<'g> VisualTokens<'g> {
    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn with_tokens(&self, tokens: Var<'g>) -> Self {
        Self { tokens, grid: self.grid }
    }
}

/// Splits a `[F, C, H, W]` latent into `patch x patch` tokens of width `C * patch^2`.
pub fn patchify<'g>(z: Var<'g>, cfg: &NetConfig) -> Result<VisualTokens<'g>> {
    let s = z.shape();
    if s.len() != 4 {
        return Err(Error::invalid("patchify", format!("expected [F, C, H, W], got {s:?}")));
    }
    let (f, c, h, w, p) = (s[0], s[1], s[2], s[3], cfg.patch);
    if h % p != 0 || w % p != 0 {
        return Err(Error::invalid("patchify", format!("latent {h}x{w} is not divisible by patch {p}")));
    }
    let grid = PatchGrid { frames: f, rows: h / p, cols: w / p };
    let tokens = z
        .reshape([f, c, grid.rows, p, grid.cols, p])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape([grid.len(), c * p * p])?;
    Ok(VisualTokens { tokens, grid })
}

/// Inverse of [`patchify`]; token width must be `channels * patch^2`.
pub fn unpatchify<'g>(t: &VisualTokens<'g>, cfg: &NetConfig) -> Result<Var<'g>> {
    let s = t.tokens.shape();
    let p = cfg.patch;
    if s.len() != 2 || s[0] != t.grid.len() || !s[1].is_multiple_of(p * p) {
        return Err(Error::invalid("unpatchify", format!("tokens {s:?} do not fit grid {:?} with patch {p}", t.grid)));
    }
    let c = s[1] / (p * p);
    let g = t.grid;
    Ok(t.tokens.reshape([g.frames, g.rows, g.cols, c, p, p])?.permute(&[0, 3, 1, 4, 2, 5])?.reshape([
        g.frames,
        c,
        g.rows * p,
        g.cols * p,
    ])?)
}

/// Fixed-length caption ids; 0 is padding.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionTokens {
    ids: Vec<u32>,
}

impl CaptionTokens {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    /// Right-pads `words` with zeros up to `len`.
    pub fn padded(words: &[u32], len: usize) -> Result<Self> {
        if words.len() > len {
            return Err(Error::invalid("caption", format!("{} words exceed length {len}", words.len())));
        }
        let mut ids = words.to_vec();
        ids.resize(len, 0);
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// The non-padding words in order.
    pub fn words(&self) -> Vec<u32> {
        self.ids.iter().copied().filter(|&i| i != 0).collect()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != 0).collect()
    }

    pub fn validate(&self, cfg: &NetConfig) -> Result<()> {
        if self.ids.len() != cfg.caption_len {
            return Err(Error::invalid(
                "caption",
                format!("length {} differs from configured {}", self.ids.len(), cfg.caption_len),
            ));
        }
        if let Some(bad) = self.ids.iter().find(|&&i| i as usize >= cfg.caption_vocab) {
            return Err(Error::invalid("caption", format!("token {bad} outside vocabulary of {}", cfg.caption_vocab)));
        }
        Ok(())
    }
}

/// `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with `w_k = 10000^(-2k/dim)`.
pub fn sinusoidal_features(t: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let a = t as f64 * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

/// Sinusoidal features followed by the `embed.time` MLP; returns `[hidden]`.
pub fn timestep_embed<'g>(g: &'g Graph, p: &Bound<'g>, t: TimeStep, cfg: &NetConfig) -> Result<Var<'g>> {
    let feats = g.constant(Tensor::new([1, cfg.hidden], sinusoidal_features(t.get(), cfg.hidden))?)?;
    Ok(mlp(p, "embed.time", feats)?.reshape([cfg.hidden])?)
}

/// Learned frame, row and column embeddings summed per token.
pub(crate) fn positional<'g>(g: &'g Graph, p: &Bound<'g>, grid: PatchGrid, cfg: &NetConfig) -> Result<Var<'g>> {
    if grid.frames > cfg.max_frames || grid.rows > cfg.max_grid || grid.cols > cfg.max_grid {
        return Err(Error::invalid(
            "positional embedding",
            format!("grid {grid:?} exceeds tables of {} frames and {} cells", cfg.max_frames, cfg.max_grid),
        ));
    }
    let n = grid.len();
    let per_frame = grid.rows * grid.cols;
    let frame: Vec<usize> = (0..n).map(|i| i / per_frame).collect();
    let row: Vec<usize> = (0..n).map(|i| (i % per_frame) / grid.cols).collect();
    let col: Vec<usize> = (0..n).map(|i| i % grid.cols).collect();
    let f = g.embed_lookup(p.get("embed.pos_frame")?, &frame)?;
    let r = g.embed_lookup(p.get("embed.pos_row")?, &row)?;
    let c = g.embed_lookup(p.get("embed.pos_col")?, &col)?;
    Ok(f.add(&r)?.add(&c)?)
}

/// Caption context `[caption_len, hidden]` and its key mask.
pub(crate) fn caption_context<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    caption: &CaptionTokens,
    cfg: &NetConfig,
) -> Result<(Var<'g>, Vec<bool>)> {
    caption.validate(cfg)?;
    let ids: Vec<usize> = caption.ids().iter().map(|&i| i as usize).collect();
    let ctx = g.embed_lookup(p.get("embed.caption")?, &ids)?;
    Ok((ctx, caption.mask()))
}
