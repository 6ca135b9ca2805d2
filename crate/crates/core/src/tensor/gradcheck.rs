use super::{Conv3dAttrs, Graph, Tensor, TensorError, Var};
use crate::rng::SeedStream;

/// Central finite-difference gradient of a scalar function of `x`.
pub fn numeric_gradient<F, E>(f: F, x: &Tensor, step: f64) -> std::result::Result<Tensor, E>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> std::result::Result<Var<'g>, E>,
    E: From<TensorError>,
{
    let eval = |data: Vec<f64>| -> std::result::Result<f64, E> {
        let g = Graph::new();
        let v = g.constant(Tensor::new(x.shape().to_vec(), data)?)?;
        Ok(f(&g, v)?.value().item())
    };
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] += step;
        minus[i] -= step;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }
    Ok(Tensor::new(x.shape().to_vec(), grad)?)
}

/// Largest elementwise `|g_ad - g_fd| / max(|g_fd|, 1e-8)` between the
/// reverse-mode gradient of `f` at `x` and central differences.
pub fn finite_difference_check<F, E>(f: F, x: &Tensor, step: f64) -> std::result::Result<f64, E>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> std::result::Result<Var<'g>, E>,
    E: From<TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_check",
            msg: format!("step must be positive, got {step}"),
        }
        .into());
    }
    let g = Graph::new();
    let v = g.leaf(x.clone(), true)?;
    let root = f(&g, v)?;
    let grads = g.backward(root)?;
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let numeric = numeric_gradient(&f, x, step)?;
    Ok(analytic.data().iter().zip(numeric.data()).map(|(a, n)| (a - n).abs() / n.abs().max(1e-8)).fold(0.0, f64::max))
}

type CaseFn = Box<dyn for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, TensorError> + Send + Sync>;

/// A named scalar function exercising one primitive.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub f: CaseFn,
}

fn case(name: &'static str, shape: Vec<usize>, f: CaseFn) -> PrimitiveCase {
    PrimitiveCase { name, shape, f }
}

/// Standard normal tensor of `shape` drawn from `seed`.
pub fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), SeedStream::new(seed).normals(n)).expect("shape and data agree")
}

/// Every primitive, wrapped as `x -> sum(op(x) * r)` for a fixed random `r`,
/// checked against central differences.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    fn weighted<'g>(y: Var<'g>, seed: u64) -> Result<Var<'g>, TensorError> {
        let r = y.graph().constant(randn(seed, &y.shape()))?;
        y.mul(&r)?.sum()
    }
    vec![
        case("matmul", vec![3, 4], Box::new(|g, x| weighted(x.matmul(&g.constant(randn(90, &[4, 2]))?)?, 1))),
        case("matmul_rhs", vec![4, 2], Box::new(|g, x| weighted(g.constant(randn(91, &[3, 4]))?.matmul(&x)?, 2))),
        case(
            "matmul_batched",
            vec![2, 3, 4],
            Box::new(|g, x| {
                let b = g.constant(randn(92, &[2, 4, 3]))?;
                weighted(x.matmul(&b)?.add(&x.slice(2, 0, 3)?)?, 3)
            }),
        ),
        case(
            "conv3d",
            vec![2, 3, 4, 4],
            Box::new(|g, x| {
                let w = g.constant(randn(93, &[2, 2, 3, 3, 3]))?;
                let b = g.constant(randn(94, &[2]))?;
                weighted(x.conv3d(&w, Some(&b), Conv3dAttrs { stride: [1, 1, 1], padding: [1, 1, 1] })?, 4)
            }),
        ),
        case(
            "conv3d_weight",
            vec![2, 2, 1, 3, 3],
            Box::new(|g, w| {
                let x = g.constant(randn(95, &[2, 2, 5, 5]))?;
                weighted(x.conv3d(&w, None, Conv3dAttrs { stride: [1, 2, 1], padding: [0, 1, 1] })?, 5)
            }),
        ),
        case("add", vec![3, 4], Box::new(|g, x| weighted(x.add(&g.constant(randn(96, &[4]))?)?, 6))),
        case("add_bias", vec![4], Box::new(|g, b| weighted(g.constant(randn(97, &[3, 4]))?.add(&b)?, 7))),
        case("sub", vec![3, 4], Box::new(|g, x| weighted(g.constant(randn(98, &[3, 4]))?.sub(&x)?, 8))),
        case("mul", vec![3, 4], Box::new(|_, x| weighted(x.mul(&x.scale(0.7)?)?, 9))),
        case("mul_broadcast", vec![4], Box::new(|g, b| weighted(g.constant(randn(99, &[2, 3, 4]))?.mul(&b)?, 10))),
        case("scale", vec![5], Box::new(|_, x| weighted(x.scale(-2.5)?, 11))),
        case("reshape", vec![2, 6], Box::new(|_, x| weighted(x.reshape([3, 4])?, 12))),
        case("permute", vec![2, 3, 4], Box::new(|_, x| weighted(x.permute(&[2, 0, 1])?, 13))),
        case("softmax", vec![3, 5], Box::new(|_, x| weighted(x.softmax(None)?, 14))),
        case(
            "softmax_masked",
            vec![3, 5],
            Box::new(|_, x| weighted(x.softmax(Some(&[true, false, true, true, false]))?, 15)),
        ),
        case("layer_norm", vec![3, 6], Box::new(|_, x| weighted(x.layer_norm(1e-5)?, 16))),
        case("gelu", vec![10], Box::new(|_, x| weighted(x.gelu()?, 17))),
        case("mean", vec![4, 3], Box::new(|_, x| x.square()?.mean())),
        case("sum", vec![4, 3], Box::new(|_, x| x.mul(&x.gelu()?)?.sum())),
        case("slice", vec![4, 5], Box::new(|_, x| weighted(x.slice(1, 1, 3)?, 18))),
        case(
            "concat",
            vec![2, 3],
            Box::new(|g, x| {
                let c = g.constant(randn(100, &[2, 2]))?;
                weighted(g.concat(&[x, c, x.scale(2.0)?], 1)?, 19)
            }),
        ),
        case("embed_lookup", vec![5, 3], Box::new(|g, t| weighted(g.embed_lookup(t, &[4, 0, 4, 2])?, 20))),
        case("gather", vec![3, 4], Box::new(|_, x| weighted(x.pad_reflect(1, 2)?, 21))),
    ]
}
