//! Finite-difference checks of every layer type on small random 64-bit
//! instances, plus the full masked-autoencoder loss on a micro configuration.

use crate::error::Result;
use crate::graph::{check_gradients, GradCheck, Graph, Var};
use crate::mae::{MaeConfig, MaeModel, MaskSpec};
use crate::nn;
use crate::params::ParamSet;
use crate::rng::{self, Prng};
use crate::tensor::Tensor;

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-5;

fn randn(rng: &mut Prng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng::normal(rng))
}

/// `Σ y ⊙ c` for a fixed random `c`, which turns any tensor output into a
/// scalar with a generic (non-symmetric) upstream gradient.
fn contract(g: &mut Graph<f64>, y: Var, rng: &mut Prng) -> Var {
    let c = g.constant(randn(rng, g.shape(y)));
    let p = g.mul(y, c);
    g.sum(p)
}

/// One named check per layer type.
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut out = Vec::new();
    let mut r = rng::seeded(seed);
    let x = randn(&mut r, &[3, 4]);

    // affine: 4·3 + 3 = 15 parameters
    let mut p = ParamSet::new();
    nn::init_linear(&mut p, &mut r, "fc", 4, 3);
    p.insert("fc.bias", randn(&mut r, &[3]));
    let s = rng::index(&mut r, 1 << 30) as u64;
    out.push((
        "affine",
        check_gradients(&p, FD_STEP, 1e-6, |g, p| {
            let mut r = rng::seeded(s);
            let xv = g.constant(x.clone());
            let y = nn::linear(g, p, "fc", xv);
            let y = g.mul(y, y);
            contract(g, y, &mut r)
        })?,
    ));

    // layer normalization: input 18 + gain 6 + shift 6 = 30 parameters
    let mut p = ParamSet::new();
    p.insert("x", randn(&mut r, &[3, 6]));
    p.insert("ln.weight", randn(&mut r, &[6]));
    p.insert("ln.bias", randn(&mut r, &[6]));
    out.push((
        "layer_norm",
        check_gradients(&p, FD_STEP, 1e-6, |g, p| {
            let mut r = rng::seeded(s);
            let xv = g.bind(p, "x");
            let y = nn::layer_norm(g, p, "ln", xv);
            contract(g, y, &mut r)
        })?,
    ));

    // multi-head attention on packed q, k, v: 3 tokens, width 4, 2 heads
    let mut p = ParamSet::new();
    p.insert("qkv", randn(&mut r, &[3, 12]));
    out.push((
        "attention",
        check_gradients(&p, FD_STEP, 1e-6, |g, p| {
            let mut r = rng::seeded(s);
            let q = g.bind(p, "qkv");
            let y = g.attention(q, 1, 3, 2);
            contract(g, y, &mut r)
        })?,
    ));

    // full pre-norm transformer block, width 4, MLP ratio 1, 2 sequences
    let mut p = ParamSet::new();
    nn::init_block(&mut p, &mut r, "blk", 4, 1);
    let xb = randn(&mut r, &[6, 4]);
    out.push((
        "transformer_block",
        check_gradients(&p, FD_STEP, 1e-6, |g, p| {
            let mut r = rng::seeded(s);
            let xv = g.constant(xb.clone());
            let y = nn::block(g, p, "blk", xv, 2, 3, 2);
            contract(g, y, &mut r)
        })?,
    ));

    // GELU: 12 parameters
    let mut p = ParamSet::new();
    p.insert("x", randn(&mut r, &[3, 4]));
    out.push((
        "gelu",
        check_gradients(&p, FD_STEP, 1e-6, |g, p| {
            let mut r = rng::seeded(s);
            let xv = g.bind(p, "x");
            let y = g.gelu(xv);
            contract(g, y, &mut r)
        })?,
    ));

    // row gather with repeats and group means
    let mut p = ParamSet::new();
    p.insert("a", randn(&mut r, &[2, 3]));
    p.insert("b", randn(&mut r, &[3, 3]));
    out.push((
        "gather_mean",
        check_gradients(&p, FD_STEP, 1e-6, |g, p| {
            let mut r = rng::seeded(s);
            let a = g.bind(p, "a");
            let b = g.bind(p, "b");
            let y = g.select_rows(&[a, b], vec![(0, 1), (1, 2), (1, 2), (0, 0)]);
            let y = g.mul(y, y);
            let y = g.mean_groups(y, 2);
            contract(g, y, &mut r)
        })?,
    ));

    // softmax cross-entropy: 4 rows, 5 classes
    let mut p = ParamSet::new();
    p.insert("logits", randn(&mut r, &[4, 5]));
    out.push((
        "softmax_cross_entropy",
        check_gradients(&p, FD_STEP, 1e-6, |g, p| {
            let l = g.bind(p, "logits");
            g.softmax_cross_entropy(l, &[0, 4, 2, 2])
        })?,
    ));

    // masked MSE over two of four rows
    let mut p = ParamSet::new();
    p.insert("pred", randn(&mut r, &[4, 3]));
    let target = randn(&mut r, &[4, 3]).into_data();
    out.push((
        "masked_mse",
        check_gradients(&p, FD_STEP, 1e-6, |g, p| {
            let v = g.bind(p, "pred");
            g.masked_mse(v, target.clone(), vec![0, 2])
        })?,
    ));
    Ok(out)
}

/// The smallest square layout with a nontrivial mask: a 4×4 image cut into
/// 2×2 patches, half of them masked, one block each side at width 4.
pub fn micro_config() -> MaeConfig {
    MaeConfig {
        image_size: 4,
        channels: 1,
        patch_size: 2,
        encoder_dim: 4,
        encoder_depth: 1,
        decoder_dim: 4,
        decoder_depth: 1,
        heads: 2,
        mlp_ratio: 1,
        mask_ratio: 0.5,
        normalize_pixels: true,
    }
}

/// Checks the gradient of the full masked reconstruction loss with respect to
/// every model parameter, mask and class tokens included.
pub fn mae_micro_check(seed: u64) -> Result<GradCheck> {
    let cfg = micro_config();
    let model = MaeModel::<f64>::new(cfg.clone(), seed)?;
    let mut r = rng::seeded(seed ^ 0x5eed);
    // Perturb tokens and biases away from their structured initial values.
    let mut params = model.params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for n in &names {
        let t = params.get_mut(n).unwrap();
        for v in t.data_mut() {
            *v += 0.1 * rng::normal(&mut r);
        }
    }
    let image = randn(&mut r, &[1, 4, 4]);
    let patches = crate::mae::patchify(&image, cfg.patch_size)?;
    let mask = MaskSpec::new(vec![0, 3], cfg.num_patches())?;
    check_gradients(&params, FD_STEP, 1e-6, |g, p| {
        let m = MaeModel {
            config: cfg.clone(),
            params: p.clone(),
        };
        m.record_mae_loss_with_masks(g, &[&patches], std::slice::from_ref(&mask), true)
            .expect("micro forward")
    })
}
