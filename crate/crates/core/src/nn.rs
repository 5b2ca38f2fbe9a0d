//! Layers shared by the autoencoder and the heads. Each layer is a pair of
//! functions: one that registers initialized parameters under a name prefix,
//! and one that records the forward computation on a [`Graph`].

use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::rng::{self, Prng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Xavier/Glorot uniform weight `[fan_in, fan_out]` and zero bias.
pub fn init_linear<T: Scalar>(p: &mut ParamSet<T>, rng: &mut Prng, prefix: &str, fan_in: usize, fan_out: usize) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(rng::uniform(rng, -a, a)));
    p.insert(format!("{prefix}.weight"), w);
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

pub fn init_norm<T: Scalar>(p: &mut ParamSet<T>, prefix: &str, dim: usize) {
    p.insert(format!("{prefix}.weight"), Tensor::ones(&[dim]));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
}

/// Normal(0, std²) entries.
pub fn init_normal<T: Scalar>(rng: &mut Prng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(std * rng::normal(rng)))
}

/// Pre-norm transformer block: attention and a two-layer GELU MLP, each
/// wrapped in a residual connection.
pub fn init_block<T: Scalar>(p: &mut ParamSet<T>, rng: &mut Prng, prefix: &str, dim: usize, mlp_ratio: usize) {
    init_norm(p, &format!("{prefix}.norm1"), dim);
    init_linear(p, rng, &format!("{prefix}.attn.qkv"), dim, 3 * dim);
    init_linear(p, rng, &format!("{prefix}.attn.proj"), dim, dim);
    init_norm(p, &format!("{prefix}.norm2"), dim);
    init_linear(p, rng, &format!("{prefix}.mlp.fc1"), dim, dim * mlp_ratio);
    init_linear(p, rng, &format!("{prefix}.mlp.fc2"), dim * mlp_ratio, dim);
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &ParamSet<T>, prefix: &str, x: Var) -> Var {
    let w = g.bind(p, &format!("{prefix}.weight"));
    let b = g.bind(p, &format!("{prefix}.bias"));
    let y = g.matmul(x, w);
    g.add_bias(y, b)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &ParamSet<T>, prefix: &str, x: Var) -> Var {
    let w = g.bind(p, &format!("{prefix}.weight"));
    let b = g.bind(p, &format!("{prefix}.bias"));
    g.layer_norm(x, w, b)
}

/// `x` is `[batch·seq, dim]`, one sequence per `seq` consecutive rows.
pub fn block<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamSet<T>,
    prefix: &str,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Var {
    let h = layer_norm(g, p, &format!("{prefix}.norm1"), x);
    let qkv = linear(g, p, &format!("{prefix}.attn.qkv"), h);
    let a = g.attention(qkv, batch, seq, heads);
    let a = linear(g, p, &format!("{prefix}.attn.proj"), a);
    let x = g.add(x, a);
    let h = layer_norm(g, p, &format!("{prefix}.norm2"), x);
    let h = linear(g, p, &format!("{prefix}.mlp.fc1"), h);
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h);
    g.add(x, h)
}

/// Fixed 2-D sine-cosine embedding for a `grid × grid` patch layout, row
/// major, `[grid², dim]`. Half of the channels encode the row coordinate and
/// half the column coordinate.
pub fn sincos_2d<T: Scalar>(grid: usize, dim: usize) -> Tensor<T> {
    assert!(dim % 4 == 0, "sin-cos embedding needs dim divisible by 4");
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            for &coord in &[r, c] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    out.push(T::lit((coord as f64 * omega).sin()));
                }
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    out.push(T::lit((coord as f64 * omega).cos()));
                }
            }
        }
    }
    Tensor::new(&[grid * grid, dim], out).expect("finite sin-cos table")
}

/// Number of scalars registered by [`init_block`].
pub fn block_param_count(dim: usize, mlp_ratio: usize) -> usize {
    let hidden = dim * mlp_ratio;
    2 * 2 * dim + (dim * 3 * dim + 3 * dim) + (dim * dim + dim) + (dim * hidden + hidden) + (hidden * dim + dim)
}
