use crate::error::{Error, Result};
use crate::tensor::Var;

use super::control::connector_fuse;
use super::layers::{attention, layer_norm, linear, mlp};
use super::params::{Bound, Init, ParamStore};
use super::{ConnectorMode, NetConfig};

/// What gets added to the visual stream in front of each DiT block.
#[derive(Clone, Copy)]
pub enum Injection<'a, 'g> {
    None,
    /// One `[T, hidden]` addend per block.
    Addends(&'a [Var<'g>]),
    /// ControlNet block outputs fused through the per-block connectors.
    Connectors {
        control: &'a [Var<'g>],
        mode: ConnectorMode,
    },
}

/// Pre-norm transformer block: self-attention, caption cross-attention, MLP.
pub(crate) fn block_forward<'g>(
    p: &Bound<'g>,
    prefix: &str,
    x: Var<'g>,
    ctx: Var<'g>,
    mask: &[bool],
    heads: usize,
) -> Result<Var<'g>> {
    let d = x.shape()[1];
    let t = x.shape()[0];

    let h = layer_norm(p, &format!("{prefix}.ln1"), x)?;
    let qkv = linear(p, &format!("{prefix}.attn.qkv"), h)?.reshape([t, 3, d])?;
    let part = |i| -> Result<Var<'g>> { Ok(qkv.slice(1, i, 1)?.reshape([t, d])?) };
    let a = attention(part(0)?, part(1)?, part(2)?, heads, None)?;
    let x = x.add(&linear(p, &format!("{prefix}.attn.out"), a)?)?;

    let h = layer_norm(p, &format!("{prefix}.ln2"), x)?;
    let q = linear(p, &format!("{prefix}.xattn.q"), h)?;
    let l = ctx.shape()[0];
    let kv = linear(p, &format!("{prefix}.xattn.kv"), ctx)?.reshape([l, 2, d])?;
    let k = kv.slice(1, 0, 1)?.reshape([l, d])?;
    let v = kv.slice(1, 1, 1)?.reshape([l, d])?;
    let a = attention(q, k, v, heads, Some(mask))?;
    let x = x.add(&linear(p, &format!("{prefix}.xattn.out"), a)?)?;

    let h = layer_norm(p, &format!("{prefix}.ln3"), x)?;
    Ok(x.add(&mlp(p, &format!("{prefix}.mlp"), h)?)?)
}

pub(crate) fn init_block(init: &Init, store: &mut ParamStore, prefix: &str, cfg: &NetConfig) -> Result<()> {
    let d = cfg.hidden;
    init.layer_norm(store, &format!("{prefix}.ln1"), d)?;
    init.linear(store, &format!("{prefix}.attn.qkv"), d, 3 * d)?;
    init.linear(store, &format!("{prefix}.attn.out"), d, d)?;
    init.layer_norm(store, &format!("{prefix}.ln2"), d)?;
    init.linear(store, &format!("{prefix}.xattn.q"), d, d)?;
    init.linear(store, &format!("{prefix}.xattn.kv"), d, 2 * d)?;
    init.linear(store, &format!("{prefix}.xattn.out"), d, d)?;
    init.layer_norm(store, &format!("{prefix}.ln3"), d)?;
    init.linear(store, &format!("{prefix}.mlp.fc1"), d, cfg.mlp_ratio * d)?;
    init.linear(store, &format!("{prefix}.mlp.fc2"), cfg.mlp_ratio * d, d)
}

/// Runs the `depth` DiT blocks over embedded tokens `[T, hidden]` and the
/// output head; returns `[T, patch_dim]`.
pub fn dit_forward<'g>(
    p: &Bound<'g>,
    cfg: &NetConfig,
    tokens: Var<'g>,
    ctx: Var<'g>,
    mask: &[bool],
    injection: Injection<'_, 'g>,
) -> Result<Var<'g>> {
    match injection {
        Injection::Addends(a) if a.len() != cfg.depth => {
            return Err(Error::invalid(
                "dit_forward",
                format!("{} injected addends for {} blocks", a.len(), cfg.depth),
            ));
        }
        Injection::Connectors { control, .. } if control.len() != cfg.controlnet_blocks() => {
            return Err(Error::invalid(
                "dit_forward",
                format!("{} control streams, expected {}", control.len(), cfg.controlnet_blocks()),
            ));
        }
        _ => {}
    }
    let mut x = tokens;
    for i in 0..cfg.depth {
        x = match injection {
            Injection::None => x,
            Injection::Addends(a) => x.add(&a[i])?,
            Injection::Connectors { control, mode } => {
                connector_fuse(p, cfg, i, x, control[super::routed_block(i)], mode)?
            }
        };
        x = block_forward(p, &format!("dit.{i}"), x, ctx, mask, cfg.heads)?;
    }
    let h = layer_norm(p, "head.ln", x)?;
    linear(p, "head", h)
}
