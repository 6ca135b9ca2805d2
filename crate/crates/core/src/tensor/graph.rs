use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{numel, Result, Tensor, TensorError};

/// Stride and zero padding for [`Var::conv3d`], ordered (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dAttrs {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for Conv3dAttrs {
    fn default() -> Self {
        Self { stride: [1; 3], padding: [0; 3] }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Conv3d { x: usize, w: usize, bias: Option<usize>, geom: ConvGeom },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Softmax { a: usize },
    LayerNorm { a: usize, rstd: Vec<f64> },
    Gelu { a: usize },
    Mean { a: usize },
    Sum { a: usize },
    Slice { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    EmbedLookup { table: usize, ids: Arc<Vec<usize>> },
    Gather { a: usize, axis: usize, indices: Arc<Vec<usize>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor ops. Node ids are a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar root with respect to `requires_grad` leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves.binary_search_by_key(&v.id, |(id, _)| *id).ok().map(|i| &self.leaves[i].1)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Sums `g` (shape `big`) over its leading axes into a buffer of `small_len`.
fn reduce_suffix(g: &[f64], small_len: usize, acc: &mut [f64]) {
    for chunk in g.chunks(small_len) {
        acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds an input tensor; rejects non-finite data.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn derived(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        parents: &[usize],
    ) -> Result<Var<'_>> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let rg = self.requires(parents);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or(TensorError::InvalidArgument { op: "concat", msg: "no inputs".into() })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut extent = 0;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let s = v.shape();
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !same {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.derived("concat", shape, data, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`, giving `[ids.len(), dim]`.
    pub fn embed_lookup<'g>(&'g self, table: Var<'g>, ids: &[usize]) -> Result<Var<'g>> {
        let t = table.value();
        if t.shape().len() != 2 || ids.iter().any(|&i| i >= t.shape()[0]) || ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "embed_lookup",
                msg: format!("ids {ids:?} invalid for table {:?}", t.shape()),
            });
        }
        let data = kernels::gather(t.shape(), t.data(), 0, ids);
        self.derived(
            "embed_lookup",
            vec![ids.len(), t.shape()[1]],
            data,
            Op::EmbedLookup { table: table.id, ids: Arc::new(ids.to_vec()) },
            &[table.id],
        )
    }

    /// Reverse pass from a scalar `root`. Gradients accumulate by summation in
    /// decreasing node order, so results are bit-reproducible.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if numel(&root_shape) != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let rg = |p: usize| nodes[p].requires_grad;
            let val = |p: usize| &nodes[p].value;
            match &node.op {
                Op::Leaf => leaves.push((id, Tensor::from_parts(node.value.shape().to_vec(), g))),
                Op::MatMul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (ash, bsh) = (av.shape(), bv.shape());
                    let m = ash[ash.len() - 2];
                    let k = ash[ash.len() - 1];
                    let n = bsh[bsh.len() - 1];
                    if bsh.len() == 2 {
                        let rows = av.numel() / k;
                        if rg(*a) {
                            let acc = accumulate(&mut grads[*a], av.numel());
                            kernels::gemm(rows, n, k, &g, n, 1, bv.data(), 1, n, acc, 1.0);
                        }
                        if rg(*b) {
                            let acc = accumulate(&mut grads[*b], bv.numel());
                            kernels::gemm(k, rows, n, av.data(), 1, k, &g, n, 1, acc, 1.0);
                        }
                    } else {
                        let batch = av.numel() / (m * k);
                        if rg(*a) {
                            let acc = accumulate(&mut grads[*a], av.numel());
                            for i in 0..batch {
                                kernels::gemm(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..],
                                    n,
                                    1,
                                    &bv.data()[i * k * n..],
                                    1,
                                    n,
                                    &mut acc[i * m * k..(i + 1) * m * k],
                                    1.0,
                                );
                            }
                        }
                        if rg(*b) {
                            let acc = accumulate(&mut grads[*b], bv.numel());
                            for i in 0..batch {
                                kernels::gemm(
                                    k,
                                    m,
                                    n,
                                    &av.data()[i * m * k..],
                                    1,
                                    k,
                                    &g[i * m * n..],
                                    n,
                                    1,
                                    &mut acc[i * k * n..(i + 1) * k * n],
                                    1.0,
                                );
                            }
                        }
                    }
                }
                Op::Conv3d { x, w, bias, geom } => {
                    let cout = val(*w).shape()[0];
                    let (rows, cols) = (geom.rows(), geom.cols());
                    if let Some(b) = bias {
                        if rg(*b) {
                            let acc = accumulate(&mut grads[*b], cout);
                            for (o, a) in acc.iter_mut().enumerate() {
                                *a += g[o * cols..(o + 1) * cols].iter().sum::<f64>();
                            }
                        }
                    }
                    if rg(*w) {
                        let colbuf = geom.im2col(val(*x).data());
                        let acc = accumulate(&mut grads[*w], cout * rows);
                        kernels::gemm(cout, cols, rows, &g, cols, 1, &colbuf, 1, cols, acc, 1.0);
                    }
                    if rg(*x) {
                        let mut dcols = vec![0.0; rows * cols];
                        kernels::gemm(rows, cout, cols, val(*w).data(), 1, rows, &g, cols, 1, &mut dcols, 0.0);
                        let acc = accumulate(&mut grads[*x], val(*x).numel());
                        geom.col2im_add(&dcols, acc);
                    }
                }
                Op::Add { a, b } | Op::Sub { a, b } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                    if rg(*a) {
                        add_into(&mut grads[*a], &g);
                    }
                    if rg(*b) {
                        let blen = val(*b).numel();
                        let acc = accumulate(&mut grads[*b], blen);
                        if sign > 0.0 {
                            reduce_suffix(&g, blen, acc);
                        } else {
                            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                            reduce_suffix(&neg, blen, acc);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let blen = bv.numel();
                    if rg(*a) {
                        let acc = accumulate(&mut grads[*a], av.numel());
                        for (i, (ac, gv)) in acc.iter_mut().zip(&g).enumerate() {
                            *ac += gv * bv.data()[i % blen];
                        }
                    }
                    if rg(*b) {
                        let acc = accumulate(&mut grads[*b], blen);
                        for (i, (gv, x)) in g.iter().zip(av.data()).enumerate() {
                            acc[i % blen] += gv * x;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let acc = accumulate(&mut grads[*a], g.len());
                    acc.iter_mut().zip(&g).for_each(|(x, gv)| *x += c * gv);
                }
                Op::Reshape { a } => add_into(&mut grads[*a], &g),
                Op::Permute { a, axes } => {
                    let inv = kernels::inverse_axes(axes);
                    let (_, back) = kernels::permute(node.value.shape(), &g, &inv)?;
                    add_into(&mut grads[*a], &back);
                }
                Op::Softmax { a } => {
                    let len = *node.value.shape().last().unwrap_or(&1);
                    let acc = accumulate(&mut grads[*a], g.len());
                    kernels::softmax_backward(node.value.data(), &g, len, acc);
                }
                Op::LayerNorm { a, rstd } => {
                    let len = *node.value.shape().last().unwrap_or(&1);
                    let acc = accumulate(&mut grads[*a], g.len());
                    kernels::layer_norm_backward(node.value.data(), rstd, &g, len, acc);
                }
                Op::Gelu { a } => {
                    let acc = accumulate(&mut grads[*a], g.len());
                    for ((ac, gv), x) in acc.iter_mut().zip(&g).zip(val(*a).data()) {
                        *ac += gv * kernels::gelu_grad(*x);
                    }
                }
                Op::Mean { a } | Op::Sum { a } => {
                    let n = val(*a).numel();
                    let s = if matches!(node.op, Op::Mean { .. }) { g[0] / n as f64 } else { g[0] };
                    let acc = accumulate(&mut grads[*a], n);
                    acc.iter_mut().for_each(|x| *x += s);
                }
                Op::Slice { a, axis, start } => {
                    let len = node.value.shape()[*axis];
                    let idx: Vec<usize> = (*start..*start + len).collect();
                    let shape = val(*a).shape().to_vec();
                    let acc = accumulate(&mut grads[*a], numel(&shape));
                    kernels::scatter_add(&shape, acc, *axis, &idx, &g);
                }
                Op::Gather { a, axis, indices } => {
                    let shape = val(*a).shape().to_vec();
                    let acc = accumulate(&mut grads[*a], numel(&shape));
                    kernels::scatter_add(&shape, acc, *axis, indices, &g);
                }
                Op::EmbedLookup { table, ids } => {
                    let shape = val(*table).shape().to_vec();
                    let acc = accumulate(&mut grads[*table], numel(&shape));
                    kernels::scatter_add(&shape, acc, 0, ids, &g);
                }
                Op::Concat { parts, axis } => {
                    let (outer, _, inner) = kernels::split_axis(node.value.shape(), *axis);
                    let total = node.value.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis] * inner;
                        if rg(p) {
                            let acc = accumulate(&mut grads[p], outer * len);
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + len];
                                acc[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                            }
                        }
                        offset += len;
                    }
                }
            }
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument { op, msg: "operands belong to different graphs".into() })
        }
    }

    /// `[.., M, K] x [K, N]` (shared right operand) or `[B.., M, K] x [B.., K, N]`.
    pub fn matmul(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(rhs, "matmul")?;
        let (a, b) = (self.value(), rhs.value());
        let (ash, bsh) = (a.shape(), b.shape());
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: ash.to_vec(), rhs: bsh.to_vec() };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let m = ash[ash.len() - 2];
        let k = ash[ash.len() - 1];
        let n = bsh[bsh.len() - 1];
        if bsh[bsh.len() - 2] != k {
            return Err(mismatch());
        }
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; numel(&shape)];
        if bsh.len() == 2 {
            let rows = a.numel() / k;
            kernels::gemm(rows, k, n, a.data(), k, 1, b.data(), n, 1, &mut out, 0.0);
        } else {
            if ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
                return Err(mismatch());
            }
            let batch = a.numel() / (m * k);
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    k,
                    1,
                    &b.data()[i * k * n..],
                    n,
                    1,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        self.graph.derived("matmul", shape, out, Op::MatMul { a: self.id, b: rhs.id }, &[self.id, rhs.id])
    }

    /// 3D convolution of a `[Cin, D, H, W]` input with a `[Cout, Cin, kd, kh, kw]`
    /// kernel and optional `[Cout]` bias, via im2col and a single matmul.
    pub fn conv3d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, attrs: Conv3dAttrs) -> Result<Var<'g>> {
        self.same_graph(weight, "conv3d")?;
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        let mismatch = || TensorError::ShapeMismatch { op: "conv3d", lhs: xs.to_vec(), rhs: ws.to_vec() };
        if xs.len() != 4 || ws.len() != 5 || ws[1] != xs[0] || attrs.stride.contains(&0) {
            return Err(mismatch());
        }
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = xs[d + 1] + 2 * attrs.padding[d];
            if ws[d + 2] > padded {
                return Err(mismatch());
            }
            out[d] = (padded - ws[d + 2]) / attrs.stride[d] + 1;
        }
        let geom = ConvGeom {
            cin: xs[0],
            dims: [xs[1], xs[2], xs[3]],
            kernel: [ws[2], ws[3], ws[4]],
            stride: attrs.stride,
            pad: attrs.padding,
            out,
        };
        let cout = ws[0];
        let cols = geom.im2col(x.data());
        let ncols = geom.cols();
        let mut data = vec![0.0; cout * ncols];
        kernels::gemm(cout, geom.rows(), ncols, w.data(), geom.rows(), 1, &cols, ncols, 1, &mut data, 0.0);
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            self.same_graph(b, "conv3d")?;
            let bv = b.value();
            if bv.shape() != [cout] {
                return Err(TensorError::ShapeMismatch { op: "conv3d", lhs: vec![cout], rhs: bv.shape().to_vec() });
            }
            for (o, row) in data.chunks_mut(ncols).enumerate() {
                row.iter_mut().for_each(|v| *v += bv.data()[o]);
            }
            parents.push(b.id);
        }
        self.graph.derived(
            "conv3d",
            vec![cout, out[0], out[1], out[2]],
            data,
            Op::Conv3d { x: self.id, w: weight.id, bias: bias.map(|b| b.id), geom },
            &parents,
        )
    }

    fn binary(&self, rhs: &Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'g>> {
        self.same_graph(rhs, name)?;
        let (a, b) = (self.value(), rhs.value());
        suffix_broadcast(name, a.shape(), b.shape())?;
        let blen = b.numel();
        let data = a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % blen])).collect();
        self.graph.derived(name, a.shape().to_vec(), data, op, &[self.id, rhs.id])
    }

    /// Elementwise sum; `rhs` may broadcast over leading axes (shape suffix).
    pub fn add(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "add", |x, y| x + y, Op::Add { a: self.id, b: rhs.id })
    }

    pub fn sub(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "sub", |x, y| x - y, Op::Sub { a: self.id, b: rhs.id })
    }

    pub fn mul(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "mul", |x, y| x * y, Op::Mul { a: self.id, b: rhs.id })
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        self.graph.derived("scale", a.shape().to_vec(), data, Op::Scale { a: self.id, c }, &[self.id])
    }

    pub fn square(&self) -> Result<Var<'g>> {
        self.mul(self)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(v, Op::Reshape { a: self.id }, rg))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let (shape, data) = kernels::permute(a.shape(), a.data(), axes)?;
        self.graph.derived("permute", shape, data, Op::Permute { a: self.id, axes: axes.to_vec() }, &[self.id])
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(TensorError::InvalidArgument { op: "transpose", msg: "needs at least 2 axes".into() });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    /// Softmax over the last axis. With `mask`, columns marked `false` get
    /// probability exactly zero and receive no gradient.
    pub fn softmax(&self, mask: Option<&[bool]>) -> Result<Var<'g>> {
        let a = self.value();
        let len = *a.shape().last().unwrap_or(&1);
        if let Some(m) = mask {
            if m.len() != len {
                return Err(TensorError::ShapeMismatch { op: "softmax", lhs: a.shape().to_vec(), rhs: vec![m.len()] });
            }
        }
        let data = kernels::softmax_rows(a.data(), len, mask);
        self.graph.derived("softmax", a.shape().to_vec(), data, Op::Softmax { a: self.id }, &[self.id])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'g>> {
        let a = self.value();
        let len = *a.shape().last().unwrap_or(&1);
        let (data, rstd) = kernels::layer_norm_rows(a.data(), len, eps);
        self.graph.derived("layer_norm", a.shape().to_vec(), data, Op::LayerNorm { a: self.id, rstd }, &[self.id])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Var<'g>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| kernels::gelu(x)).collect();
        self.graph.derived("gelu", a.shape().to_vec(), data, Op::Gelu { a: self.id }, &[self.id])
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        let s = self.value().data().iter().sum();
        self.graph.derived("sum", vec![1], vec![s], Op::Sum { a: self.id }, &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.data().iter().sum::<f64>() / a.numel() as f64;
        self.graph.derived("mean", vec![1], vec![s], Op::Mean { a: self.id }, &[self.id])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        if axis >= a.shape().len() || len == 0 || start + len > a.shape()[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape()),
            });
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let data = kernels::gather(a.shape(), a.data(), axis, &idx);
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        self.graph.derived("slice", shape, data, Op::Slice { a: self.id, axis, start }, &[self.id])
    }

    /// Selects (possibly repeated) positions along `axis`.
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if axis >= a.shape().len() || indices.is_empty() || indices.iter().any(|&i| i >= a.shape()[axis]) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!("indices out of range for axis {axis} of {:?}", a.shape()),
            });
        }
        let data = kernels::gather(a.shape(), a.data(), axis, indices);
        let mut shape = a.shape().to_vec();
        shape[axis] = indices.len();
        self.graph.derived(
            "gather",
            shape,
            data,
            Op::Gather { a: self.id, axis, indices: Arc::new(indices.to_vec()) },
            &[self.id],
        )
    }

    /// Reflect-pads `axis` by `pad` on both sides (edge-replicates when the
    /// extent is 1).
    pub fn pad_reflect(&self, axis: usize, pad: usize) -> Result<Var<'g>> {
        if pad == 0 {
            return Ok(*self);
        }
        let n = *self
            .shape()
            .get(axis)
            .ok_or(TensorError::InvalidArgument { op: "pad_reflect", msg: format!("axis {axis} out of range") })?;
        let reflect = |i: isize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n as isize - 1);
            let mut j = i.rem_euclid(period);
            if j >= n as isize {
                j = period - j;
            }
            j as usize
        };
        let idx: Vec<usize> = (-(pad as isize)..(n + pad) as isize).map(reflect).collect();
        self.gather(axis, &idx)
    }
}
