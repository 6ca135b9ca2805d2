use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::{Conv3dAttrs, Tensor, Var};

use super::layers::{attention, linear, mlp};
use super::params::{Bound, Init, ParamStore};
use super::{ConnectorMode, NetConfig, LN_EPS};

pub(crate) const PROJECTOR_BLOCKS: usize = 3;

/// The ControlNet block whose output feeds connector `i`.
pub fn routed_block(i: usize) -> usize {
    i / 6
}

/// Deep-copies the patch embedding and the first `depth / 6` DiT blocks
/// into the ControlNet namespace.
pub fn controlnet_init_from_dit(store: &mut ParamStore, cfg: &NetConfig) -> Result<()> {
    let mut copies = Vec::new();
    for (name, p) in store.iter() {
        let target = if let Some(rest) = name.strip_prefix("embed.patch.") {
            Some(format!("controlnet.patch.{rest}"))
        } else if let Some(rest) = name.strip_prefix("dit.") {
            let (idx, tail) = rest.split_once('.').unwrap_or((rest, ""));
            match idx.parse::<usize>() {
                Ok(k) if k < cfg.controlnet_blocks() => Some(format!("controlnet.{k}.{tail}")),
                _ => None,
            }
        } else {
            None
        };
        if let Some(t) = target {
            let deep = Tensor::new(p.tensor.shape().to_vec(), p.tensor.to_vec())?;
            copies.push((t, deep));
        }
    }
    let per_block = copies.iter().filter(|(n, _)| n.starts_with("controlnet.0.")).count();
    let has_patch = copies.iter().any(|(n, _)| n.starts_with("controlnet.patch."));
    let blocks =
        (0..cfg.controlnet_blocks()).all(|k| copies.iter().any(|(n, _)| n.starts_with(&format!("controlnet.{k}."))));
    if !has_patch || per_block == 0 || !blocks {
        return Err(Error::Missing {
            what: "backbone weights for ControlNet initialization",
            path: "embed.patch.*, dit.*".into(),
        });
    }
    for (name, t) in copies {
        store.insert(name, t)?;
    }
    Ok(())
}

/// Adds the projector, the ControlNet copy and the connectors to a store
/// that already holds a backbone. Output paths start at zero.
pub fn init_control(store: &mut ParamStore, cfg: &NetConfig, seed: SeedStream) -> Result<()> {
    cfg.validate()?;
    controlnet_init_from_dit(store, cfg)?;
    let init = Init::new(seed.derive("control-init"));
    let (c, w) = (cfg.latent_channels, cfg.projector_width);
    for k in 0..PROJECTOR_BLOCKS {
        let s = format!("projector.{k}.spatial.w");
        store.insert(&s, init.normal(&s, &[w, c, 1, 3, 3], (1.0 / (9 * c) as f64).sqrt()))?;
        store.insert(format!("projector.{k}.spatial.b"), Tensor::zeros([w]))?;
        let t = format!("projector.{k}.temporal.w");
        store.insert(&t, init.normal(&t, &[c, w, 3, 1, 1], (1.0 / (3 * w) as f64).sqrt()))?;
        store.insert(format!("projector.{k}.temporal.b"), Tensor::zeros([c]))?;
    }
    store.insert("projector.out.w", Tensor::zeros([c, c, 1, 1, 1]))?;
    store.insert("projector.out.b", Tensor::zeros([c]))?;

    let d = cfg.hidden;
    for i in 0..cfg.depth {
        init.linear(store, &format!("connector.{i}.mlp.fc1"), d, d)?;
        init.zero_linear(store, &format!("connector.{i}.mlp.fc2"), d, d)?;
        for part in ["q", "k", "v"] {
            init.linear(store, &format!("connector.{i}.ca.{part}"), d, d)?;
        }
        init.zero_linear(store, &format!("connector.{i}.ca.out"), d, d)?;
    }
    Ok(())
}

/// Three spatiotemporal residual blocks and a 1x1 output conv on top of an
/// identity skip. Input and output are `[F, C, H, W]`.
pub fn control_projector<'g>(p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
    let shape = z.shape();
    if shape.len() != 4 {
        return Err(Error::invalid("control_projector", format!("expected [F, C, H, W], got {shape:?}")));
    }
    let x = z.permute(&[1, 0, 2, 3])?;
    let mut h = x;
    for k in 0..PROJECTOR_BLOCKS {
        let sw = p.get(&format!("projector.{k}.spatial.w"))?;
        let sb = p.get(&format!("projector.{k}.spatial.b"))?;
        let tw = p.get(&format!("projector.{k}.temporal.w"))?;
        let tb = p.get(&format!("projector.{k}.temporal.b"))?;
        let u = h.pad_reflect(2, 1)?.pad_reflect(3, 1)?.conv3d(&sw, Some(&sb), Conv3dAttrs::default())?.gelu()?;
        let u = u.pad_reflect(1, 1)?.conv3d(&tw, Some(&tb), Conv3dAttrs::default())?;
        h = h.add(&u)?;
    }
    let out = h.conv3d(&p.get("projector.out.w")?, Some(&p.get("projector.out.b")?), Conv3dAttrs::default())?;
    Ok(x.add(&out)?.permute(&[1, 0, 2, 3])?)
}

/// `x + MLP(c) + CA(x, c)` for connector `i`, with either branch dropped by `mode`.
pub fn connector_fuse<'g>(
    p: &Bound<'g>,
    cfg: &NetConfig,
    i: usize,
    x: Var<'g>,
    c: Var<'g>,
    mode: ConnectorMode,
) -> Result<Var<'g>> {
    if x.shape() != c.shape() {
        return Err(Error::invalid(
            "connector_fuse",
            format!("visual tokens {:?} and control tokens {:?} differ", x.shape(), c.shape()),
        ));
    }
    if i >= cfg.depth {
        return Err(Error::invalid("connector_fuse", format!("connector {i} of {}", cfg.depth)));
    }
    let mut out = x;
    if mode.uses_mlp() {
        out = out.add(&mlp(p, &format!("connector.{i}.mlp"), c)?)?;
    }
    if mode.uses_ca() {
        let (xn, cn) = (x.layer_norm(LN_EPS)?, c.layer_norm(LN_EPS)?);
        let q = linear(p, &format!("connector.{i}.ca.q"), xn)?;
        let k = linear(p, &format!("connector.{i}.ca.k"), cn)?;
        let v = linear(p, &format!("connector.{i}.ca.v"), cn)?;
        let a = attention(q, k, v, cfg.heads, None)?;
        out = out.add(&linear(p, &format!("connector.{i}.ca.out"), a)?)?;
    }
    Ok(out)
}
