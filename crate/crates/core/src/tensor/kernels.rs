//! Raw buffer kernels shared by the forward and backward passes.

use super::{Result, TensorError};

/// `c = a · b + beta · c` for row/column-strided operands (alpha = 1).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers size `a`, `b` and `c` to cover the strided extents
    // (checked in debug builds above and by shape validation in the graph).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

pub(crate) fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    let ok = axes.len() == shape.len()
        && axes.iter().all(|&a| {
            if a >= seen.len() || seen[a] {
                false
            } else {
                seen[a] = true;
                true
            }
        });
    if ok {
        Ok(())
    } else {
        Err(TensorError::InvalidArgument {
            op: "permute",
            msg: format!("axes {axes:?} are not a permutation for shape {shape:?}"),
        })
    }
}

pub(crate) fn permute(shape: &[usize], data: &[f64], axes: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    validate_axes(shape, axes)?;
    let strides = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let nd = shape.len();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if nd == 0 {
        return Ok((out_shape, data.to_vec()));
    }
    let inner = out_shape[nd - 1];
    let inner_stride = src[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&data[off..off + inner]);
        } else {
            out.extend((0..inner).map(|i| data[off + i * inner_stride]));
        }
        let mut d = nd - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            off += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok((out_shape, out))
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn gather(shape: &[usize], data: &[f64], axis: usize, indices: &[usize]) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        let base = o * extent * inner;
        for &i in indices {
            out.extend_from_slice(&data[base + i * inner..base + (i + 1) * inner]);
        }
    }
    out
}

pub(crate) fn scatter_add(shape: &[usize], acc: &mut [f64], axis: usize, indices: &[usize], grad: &[f64]) {
    let (outer, extent, inner) = split_axis(shape, axis);
    let mut src = 0;
    for o in 0..outer {
        let base = o * extent * inner;
        for &i in indices {
            let dst = &mut acc[base + i * inner..base + (i + 1) * inner];
            for (d, g) in dst.iter_mut().zip(&grad[src..src + inner]) {
                *d += g;
            }
            src += inner;
        }
    }
}

/// Softmax over rows of length `len`; masked-out columns get exactly zero.
pub(crate) fn softmax_rows(data: &[f64], len: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(len).zip(out.chunks_mut(len)) {
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let max = (0..len).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in 0..len {
            if keep(j) {
                let e = (row[j] - max).exp();
                o[j] = e;
                total += e;
            }
        }
        let inv = 1.0 / total;
        for v in o.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], len: usize, acc: &mut [f64]) {
    for ((yr, dr), ar) in y.chunks(len).zip(dy.chunks(len)).zip(acc.chunks_mut(len)) {
        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for j in 0..len {
            ar[j] += yr[j] * (dr[j] - dot);
        }
    }
}

/// Per-row inverse standard deviation for layer normalization.
pub(crate) fn layer_norm_rows(data: &[f64], len: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; data.len()];
    let mut rstd = Vec::with_capacity(data.len() / len);
    let inv_len = 1.0 / len as f64;
    for (row, o) in data.chunks(len).zip(out.chunks_mut(len)) {
        let mean = row.iter().sum::<f64>() * inv_len;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_len;
        let r = 1.0 / (var + eps).sqrt();
        for (ov, v) in o.iter_mut().zip(row) {
            *ov = (v - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}

pub(crate) fn layer_norm_backward(y: &[f64], rstd: &[f64], dy: &[f64], len: usize, acc: &mut [f64]) {
    let inv_len = 1.0 / len as f64;
    for (((yr, dr), ar), &r) in y.chunks(len).zip(dy.chunks(len)).zip(acc.chunks_mut(len)).zip(rstd) {
        let mean_dy = dr.iter().sum::<f64>() * inv_len;
        let mean_dyy = yr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>() * inv_len;
        for j in 0..len {
            ar[j] += r * (dr[j] - mean_dy - yr[j] * mean_dyy);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Geometry of a stride/zero-padding 3D convolution over a `[C, D, H, W]` input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out: [usize; 3],
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn cols(&self) -> usize {
        self.out.iter().product()
    }

    /// Visits every (col row, output column, input offset) with an in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [d, h, w] = self.dims;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.out;
        let ncols = self.cols();
        for c in 0..self.cin {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = ((c * kd + a) * kh + b) * kw + e;
                        for z in 0..od {
                            let iz = (z * self.stride[0] + a) as isize - self.pad[0] as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let iy = (y * self.stride[1] + b) as isize - self.pad[1] as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let base = ((c * d + iz as usize) * h + iy as usize) * w;
                                let col_base = (z * oh + y) * ow;
                                for x in 0..ow {
                                    let ix = (x * self.stride[2] + e) as isize - self.pad[2] as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    f(row * ncols + col_base + x, base + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.cols()];
        self.for_each_tap(|ci, ii| cols[ci] = input[ii]);
        cols
    }

    pub fn col2im_add(&self, cols: &[f64], acc: &mut [f64]) {
        self.for_each_tap(|ci, ii| acc[ii] += cols[ci]);
    }
}
