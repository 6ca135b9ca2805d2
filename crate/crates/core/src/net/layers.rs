use crate::error::Result;
use crate::tensor::Var;

use super::params::Bound;
use super::LN_EPS;

/// `x W + b` with `W` stored as `[in, out]`.
pub(crate) fn linear<'g>(p: &Bound<'g>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(x.matmul(&w)?.add(&b)?)
}

pub(crate) fn layer_norm<'g>(p: &Bound<'g>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let g = p.get(&format!("{prefix}.g"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(x.layer_norm(LN_EPS)?.mul(&g)?.add(&b)?)
}

/// Two linear layers with a GELU between.
pub(crate) fn mlp<'g>(p: &Bound<'g>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let h = linear(p, &format!("{prefix}.fc1"), x)?.gelu()?;
    linear(p, &format!("{prefix}.fc2"), h)
}

/// Scaled dot-product attention over `[Tq, D]` queries and `[Tk, D]`
/// keys/values split into `heads`; `mask` marks usable key positions.
pub(crate) fn attention<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var<'g>> {
    let (tq, d) = (q.shape()[0], q.shape()[1]);
    let tk = k.shape()[0];
    let dh = d / heads;
    let q = q.reshape([tq, heads, dh])?.permute(&[1, 0, 2])?;
    let kt = k.reshape([tk, heads, dh])?.permute(&[1, 2, 0])?;
    let v = v.reshape([tk, heads, dh])?.permute(&[1, 0, 2])?;
    let probs = q.matmul(&kt)?.scale(1.0 / (dh as f64).sqrt())?.softmax(mask)?;
    Ok(probs.matmul(&v)?.permute(&[1, 0, 2])?.reshape([tq, d])?)
}
