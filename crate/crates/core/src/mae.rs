//! Masked autoencoder: patching, random masking, an encoder that only sees
//! visible patches, a decoder over every position, and the masked
//! reconstruction loss.
//!
//! Parameter layout (`D` encoder width, `Dd` decoder width, `P` patches,
//! `pd` patch dimension):
//!
//! | name                         | shape        | part      |
//! |------------------------------|--------------|-----------|
//! | `cls_token`                  | `[1, D]`     | encoder   |
//! | `encoder.patch_embed.*`      | `[pd, D]`    | encoder   |
//! | `encoder.pos_embed`          | `[P, D]`     | encoder   |
//! | `encoder.blocks.{i}.*`       |              | encoder   |
//! | `encoder.norm.*`             | `[D]`        | encoder   |
//! | `mask_token`                 | `[1, Dd]`    | decoder   |
//! | `decoder.embed.*`            | `[D, Dd]`    | decoder   |
//! | `decoder.pos_embed`          | `[P, Dd]`    | decoder   |
//! | `decoder.blocks.{i}.*`       |              | decoder   |
//! | `decoder.norm.*`             | `[Dd]`       | decoder   |
//! | `decoder.pred.*`             | `[Dd, pd]`   | decoder   |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::ParamSet;
use crate::rng::{self, Prng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard added to the per-patch variance when normalizing targets.
pub const PIXEL_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    /// Hidden width of every block's MLP as a multiple of the block width.
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub normalize_pixels: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            encoder_dim: 64,
            encoder_depth: 4,
            decoder_dim: 32,
            decoder_depth: 2,
            heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.75,
            normalize_pixels: true,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("mae: {m}")));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("channels, heads and mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        for (what, d) in [("encoder", self.encoder_dim), ("decoder", self.decoder_dim)] {
            if d == 0 || d % self.heads != 0 {
                return bad(format!("{what} dim {d} is not divisible by {} heads", self.heads));
            }
            if d % 4 != 0 {
                return bad(format!("{what} dim {d} must be divisible by 4 (positional embedding)"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Scalar parameter count, a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        let (d, dd, p, pd) = (self.encoder_dim, self.decoder_dim, self.num_patches(), self.patch_dim());
        let enc = d + (pd * d + d) + p * d + self.encoder_depth * nn::block_param_count(d, self.mlp_ratio) + 2 * d;
        let dec = dd
            + (d * dd + dd)
            + p * dd
            + self.decoder_depth * nn::block_param_count(dd, self.mlp_ratio)
            + 2 * dd
            + (dd * pd + pd);
        enc + dec
    }
}

/// The sin-cos positional embeddings are constants, never trained.
pub fn is_fixed_param(name: &str) -> bool {
    name.ends_with("pos_embed")
}

/// True for parameters of the encoder `f`, including the class token.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.") || name == "cls_token"
}

/// True for parameters of the decoder `g`, including the mask token.
pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("decoder.") || name == "mask_token"
}

/// `round(ratio · total)` with ties to even.
pub fn mask_count(total: usize, ratio: f64) -> usize {
    (ratio * total as f64).round_ties_even() as usize
}

/// Sorted indices of masked patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    masked: Vec<usize>,
    total: usize,
}

impl MaskSpec {
    pub fn new(mut masked: Vec<usize>, total: usize) -> Result<Self> {
        masked.sort_unstable();
        if masked.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("mask has duplicate indices".into()));
        }
        if masked.last().is_some_and(|&m| m >= total) {
            return Err(Error::Config(format!("mask index out of range for {total} patches")));
        }
        Ok(MaskSpec { masked, total })
    }

    pub fn none(total: usize) -> Self {
        MaskSpec { masked: vec![], total }
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    /// Visible patch indices in increasing order.
    pub fn visible(&self) -> Vec<usize> {
        let mut m = self.masked.iter().peekable();
        (0..self.total)
            .filter(|i| {
                if m.peek() == Some(&i) {
                    m.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn num_visible(&self) -> usize {
        self.total - self.masked.len()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// Shuffles `0..total` with Fisher–Yates and masks the first
/// `round(ratio · total)` entries of the permutation.
pub fn sample_mask(total: usize, ratio: f64, rng: &mut Prng) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let k = mask_count(total, ratio);
    let mut perm: Vec<usize> = (0..total).collect();
    rng::shuffle(rng, &mut perm);
    perm.truncate(k);
    MaskSpec::new(perm, total)
}

/// `[C, H, W]` → `[num_patches, C·p·p]`, patches in row-major grid order and
/// values inside a patch ordered `(dy, dx, c)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::shape(format!("patchify with patch size {patch}"), &[0, patch, patch], s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let d = image.data();
    let mut out = Vec::with_capacity(d.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        out.push(d[(ch * h + gy * patch + dy) * w + gx * patch + dx]);
                    }
                }
            }
        }
    }
    Tensor::from_vec_unchecked(&[gh * gw, c * patch * patch], out)
}

/// Inverse of [`patchify`] for a square image.
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, channels: usize, patch: usize) -> Result<Tensor<T>> {
    let n = patches.rows();
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n || patches.cols() != channels * patch * patch {
        return Err(Error::shape(
            "unpatchify",
            &[grid * grid, channels * patch * patch],
            patches.shape(),
        ));
    }
    let side = grid * patch;
    let mut out = vec![T::zero(); channels * side * side];
    let d = patches.data();
    let mut k = 0;
    for gy in 0..grid {
        for gx in 0..grid {
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..channels {
                        out[(ch * side + gy * patch + dy) * side + gx * patch + dx] = d[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec_unchecked(&[channels, side, side], out)
}

/// Standardizes every row by its own mean and (population) variance plus
/// [`PIXEL_NORM_EPS`].
pub fn normalize_patches<T: Scalar>(patches: &[T], patch_dim: usize) -> Vec<T> {
    let eps = T::lit(PIXEL_NORM_EPS);
    let inv = T::one() / T::lit(patch_dim as f64);
    let mut out = Vec::with_capacity(patches.len());
    for row in patches.chunks_exact(patch_dim) {
        let mean = row.iter().copied().sum::<T>() * inv;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
        let r = T::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * r));
    }
    out
}

/// Encoder and decoder parameters together with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeModel<T> {
    pub config: MaeConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> MaeModel<T> {
    /// Xavier-initialized linear maps, sin-cos positional embeddings, and
    /// `N(0, 0.02²)` class and mask tokens.
    pub fn new(config: MaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut p = ParamSet::new();
        let (d, dd, pd) = (config.encoder_dim, config.decoder_dim, config.patch_dim());
        p.insert("cls_token", nn::init_normal(&mut rng, &[1, d], 0.02));
        p.insert("mask_token", nn::init_normal(&mut rng, &[1, dd], 0.02));
        nn::init_linear(&mut p, &mut rng, "encoder.patch_embed", pd, d);
        p.insert("encoder.pos_embed", nn::sincos_2d(config.grid(), d));
        for i in 0..config.encoder_depth {
            nn::init_block(&mut p, &mut rng, &format!("encoder.blocks.{i}"), d, config.mlp_ratio);
        }
        nn::init_norm(&mut p, "encoder.norm", d);
        nn::init_linear(&mut p, &mut rng, "decoder.embed", d, dd);
        p.insert("decoder.pos_embed", nn::sincos_2d(config.grid(), dd));
        for i in 0..config.decoder_depth {
            nn::init_block(&mut p, &mut rng, &format!("decoder.blocks.{i}"), dd, config.mlp_ratio);
        }
        nn::init_norm(&mut p, "decoder.norm", dd);
        nn::init_linear(&mut p, &mut rng, "decoder.pred", dd, pd);
        Ok(MaeModel { config, params: p })
    }

    /// Wraps loaded parameters after checking names and shapes against a
    /// freshly initialized model of the same configuration.
    pub fn from_params(config: MaeConfig, params: ParamSet<T>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        check_layout(&template.params, &params)?;
        Ok(MaeModel { config, params })
    }

    pub fn load(config: MaeConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(config, ParamSet::<f32>::load(path)?.cast())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Encodes patch rows whose grid positions are given explicitly.
    ///
    /// `rows` is `[batch·per_sample, pd]`, `positions[i]` the grid index of
    /// row `i`. Returns `[batch·(per_sample + 1), D]`, with the class token
    /// first in every sequence.
    pub fn encode_with_positions(
        &self,
        g: &mut Graph<T>,
        rows: Tensor<T>,
        positions: &[usize],
        batch: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        if rows.cols() != cfg.patch_dim() || rows.rows() != positions.len() || batch == 0 || positions.len() % batch != 0 {
            return Err(Error::shape(
                "encoder input",
                &[positions.len(), cfg.patch_dim()],
                rows.shape(),
            ));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= cfg.num_patches()) {
            return Err(Error::Config(format!("patch position {bad} out of range")));
        }
        let per = positions.len() / batch;
        let x = g.constant(rows.reshape(&[positions.len(), cfg.patch_dim()])?);
        let emb = nn::linear(g, &self.params, "encoder.patch_embed", x);
        let pos = g.bind(&self.params, "encoder.pos_embed");
        let pos = g.select_rows(&[pos], positions.iter().map(|&p| (0, p as u32)).collect());
        let emb = g.add(emb, pos);
        let cls = g.bind(&self.params, "cls_token");
        let mut index = Vec::with_capacity(batch * (per + 1));
        for b in 0..batch {
            index.push((0, 0));
            index.extend((0..per).map(|i| (1, (b * per + i) as u32)));
        }
        let mut x = g.select_rows(&[cls, emb], index);
        for i in 0..cfg.encoder_depth {
            x = nn::block(g, &self.params, &format!("encoder.blocks.{i}"), x, batch, per + 1, cfg.heads);
        }
        Ok(nn::layer_norm(g, &self.params, "encoder.norm", x))
    }

    /// Encodes only the visible patches of each image. `patches[b]` is the
    /// patchified image `b` and `masks[b]` its mask; all masks must hide the
    /// same number of patches. Masked pixel data is never read.
    pub fn encode_visible(&self, g: &mut Graph<T>, patches: &[&Tensor<T>], masks: &[MaskSpec]) -> Result<Var> {
        let (p, pd) = (self.config.num_patches(), self.config.patch_dim());
        if patches.len() != masks.len() || patches.is_empty() {
            return Err(Error::Config("one mask per image required".into()));
        }
        let visible = masks[0].num_visible();
        let mut rows = Vec::with_capacity(patches.len() * visible * pd);
        let mut positions = Vec::with_capacity(patches.len() * visible);
        for (pt, m) in patches.iter().zip(masks) {
            if pt.shape() != [p, pd] {
                return Err(Error::shape("patches", &[p, pd], pt.shape()));
            }
            if m.total() != p {
                return Err(Error::Config(format!("mask covers {} patches, image has {p}", m.total())));
            }
            if m.num_visible() != visible {
                return Err(Error::Config("masks in a batch must hide equally many patches".into()));
            }
            for i in m.visible() {
                rows.extend_from_slice(pt.row(i));
                positions.push(i);
            }
        }
        let rows = Tensor::from_vec_unchecked(&[positions.len(), pd], rows)?;
        self.encode_with_positions(g, rows, &positions, patches.len())
    }

    /// Decodes encoder output back to every patch position: `[batch·P, pd]`.
    /// Masked positions are filled with the shared mask token before the
    /// decoder positional embedding is added.
    pub fn decode_full(&self, g: &mut Graph<T>, latent: Var, masks: &[MaskSpec]) -> Result<Var> {
        let cfg = &self.config;
        let (p, batch) = (cfg.num_patches(), masks.len());
        let visible = masks.first().map_or(0, MaskSpec::num_visible);
        if masks.iter().any(|m| m.total() != p || m.num_visible() != visible) {
            return Err(Error::Config("decoder masks do not match the encoder batch".into()));
        }
        let per = visible + 1;
        if g.shape(latent) != [batch * per, cfg.encoder_dim] {
            return Err(Error::shape("decoder input", &[batch * per, cfg.encoder_dim], g.shape(latent)));
        }
        let z = nn::linear(g, &self.params, "decoder.embed", latent);
        let mask_tok = g.bind(&self.params, "mask_token");
        let mut index = Vec::with_capacity(batch * (p + 1));
        for (b, m) in masks.iter().enumerate() {
            let base = (b * per) as u32;
            index.push((0, base));
            let mut rank = 0u32;
            for i in 0..p {
                if m.is_masked(i) {
                    index.push((1, 0));
                } else {
                    rank += 1;
                    index.push((0, base + rank));
                }
            }
        }
        let x = g.select_rows(&[z, mask_tok], index);
        let pos = g.bind(&self.params, "decoder.pos_embed");
        let zero = g.constant(Tensor::zeros(&[1, cfg.decoder_dim]));
        let mut pidx = Vec::with_capacity(batch * (p + 1));
        for _ in 0..batch {
            pidx.push((1, 0));
            pidx.extend((0..p as u32).map(|i| (0, i)));
        }
        let pos = g.select_rows(&[pos, zero], pidx);
        let mut x = g.add(x, pos);
        for i in 0..cfg.decoder_depth {
            x = nn::block(g, &self.params, &format!("decoder.blocks.{i}"), x, batch, p + 1, cfg.heads);
        }
        let x = nn::layer_norm(g, &self.params, "decoder.norm", x);
        let out = nn::linear(g, &self.params, "decoder.pred", x);
        let keep = (0..batch)
            .flat_map(|b| (1..=p).map(move |i| (0, (b * (p + 1) + i) as u32)))
            .collect();
        Ok(g.select_rows(&[out], keep))
    }

    /// Mean squared error over masked patches only.
    pub fn reconstruction_loss(
        &self,
        g: &mut Graph<T>,
        pred: Var,
        targets: &[&Tensor<T>],
        masks: &[MaskSpec],
        normalize_pixels: bool,
    ) -> Result<Var> {
        reconstruction_loss(g, pred, targets, masks, normalize_pixels)
    }

    /// Records `l_s(g∘f(mask(x)), x)` for a batch of images with fresh masks
    /// drawn from `rng`, one per image, in order.
    pub fn record_mae_loss(
        &self,
        g: &mut Graph<T>,
        images: &[&Tensor<T>],
        mask_ratio: f64,
        rng: &mut Prng,
        normalize_pixels: bool,
    ) -> Result<(Var, Vec<MaskSpec>)> {
        let patches = images
            .iter()
            .map(|im| patchify(im, self.config.patch_size))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = patches.iter().collect();
        let masks = (0..images.len())
            .map(|_| sample_mask(self.config.num_patches(), mask_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let loss = self.record_mae_loss_with_masks(g, &refs, &masks, normalize_pixels)?;
        Ok((loss, masks))
    }

    /// Same as [`MaeModel::record_mae_loss`] for already patchified inputs and
    /// given masks.
    pub fn record_mae_loss_with_masks(
        &self,
        g: &mut Graph<T>,
        patches: &[&Tensor<T>],
        masks: &[MaskSpec],
        normalize_pixels: bool,
    ) -> Result<Var> {
        if masks.iter().any(|m| m.num_masked() == 0) {
            return Err(Error::EmptyMask);
        }
        let latent = self.encode_visible(g, patches, masks)?;
        let pred = self.decode_full(g, latent, masks)?;
        reconstruction_loss(g, pred, patches, masks, normalize_pixels)
    }

    /// Loss value of one image under a freshly sampled mask (no gradients).
    pub fn mae_loss(
        &self,
        image: &Tensor<T>,
        mask_ratio: f64,
        rng: &mut Prng,
        normalize_pixels: bool,
    ) -> Result<(T, MaskSpec)> {
        let mut g = Graph::inference();
        let (loss, mut masks) = self.record_mae_loss(&mut g, &[image], mask_ratio, rng, normalize_pixels)?;
        Ok((g.scalar(loss)?, masks.remove(0)))
    }

    /// Encoder output on unmasked images, `[batch·(P+1), D]`.
    pub fn encode_full(&self, g: &mut Graph<T>, images: &[&Tensor<T>]) -> Result<Var> {
        let patches = images
            .iter()
            .map(|im| patchify(im, self.config.patch_size))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = patches.iter().collect();
        let masks = vec![MaskSpec::none(self.config.num_patches()); images.len()];
        self.encode_visible(g, &refs, &masks)
    }
}

/// See [`MaeModel::reconstruction_loss`]. `pred` is `[batch·P, pd]`.
pub fn reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    targets: &[&Tensor<T>],
    masks: &[MaskSpec],
    normalize_pixels: bool,
) -> Result<Var> {
    if targets.len() != masks.len() || targets.is_empty() {
        return Err(Error::Config("one mask per target required".into()));
    }
    let (p, pd) = (targets[0].rows(), targets[0].cols());
    if g.shape(pred) != [targets.len() * p, pd] {
        return Err(Error::shape("reconstruction prediction", &[targets.len() * p, pd], g.shape(pred)));
    }
    let mut rows = Vec::new();
    let mut target = Vec::with_capacity(targets.len() * p * pd);
    for (b, (t, m)) in targets.iter().zip(masks).enumerate() {
        if t.shape() != [p, pd] || m.total() != p {
            return Err(Error::shape("reconstruction target", &[p, pd], t.shape()));
        }
        rows.extend(m.masked().iter().map(|&i| b * p + i));
        if normalize_pixels {
            // Only masked rows enter the loss; visible rows are left as-is.
            let mut norm = t.data().to_vec();
            for &i in m.masked() {
                let r = normalize_patches(t.row(i), pd);
                norm[i * pd..(i + 1) * pd].copy_from_slice(&r);
            }
            target.extend(norm);
        } else {
            target.extend_from_slice(t.data());
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(g.masked_mse(pred, target, rows))
}

/// Errors unless `got` has exactly the names and shapes of `template`.
pub fn check_layout<T: Scalar>(template: &ParamSet<T>, got: &ParamSet<T>) -> Result<()> {
    for (name, t) in template.iter() {
        match got.get(name) {
            None => return Err(Error::Format(format!("checkpoint is missing `{name}`"))),
            Some(v) if v.shape() != t.shape() => {
                return Err(Error::shape(format!("checkpoint entry `{name}`"), t.shape(), v.shape()))
            }
            _ => {}
        }
    }
    if let Some(extra) = got.names().find(|n| !template.contains(n)) {
        return Err(Error::Format(format!("unexpected checkpoint entry `{extra}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor<f32> {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(&[1, 32, 32], |_| rng::unit(&mut r) as f32)
    }

    #[test]
    fn patchify_default_geometry() {
        let p = patchify(&image(1), 8).unwrap();
        assert_eq!(p.shape(), &[16, 64]);
    }

    #[test]
    fn patchify_constant_image() {
        let im = Tensor::<f32>::full(&[1, 32, 32], 0.3);
        let p = patchify(&im, 8).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn patchify_rejects_indivisible_extent() {
        let im = Tensor::<f32>::zeros(&[1, 30, 30]);
        assert!(patchify(&im, 8).is_err());
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let im = Tensor::<f32>::from_fn(&[1, 4, 4], |i| i as f32);
        let p = patchify(&im, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn multi_channel_round_trip() {
        let im = Tensor::<f32>::from_fn(&[3, 8, 8], |i| i as f32);
        let p = patchify(&im, 4).unwrap();
        assert_eq!(p.shape(), &[4, 48]);
        assert_eq!(unpatchify(&p, 3, 4).unwrap(), im);
    }

    #[test]
    fn mask_counts() {
        let mut r = rng::seeded(0);
        assert_eq!(sample_mask(16, 0.75, &mut r).unwrap().num_masked(), 12);
        assert_eq!(sample_mask(16, 0.0, &mut r).unwrap().num_masked(), 0);
        assert!(sample_mask(16, 1.0, &mut r).is_err());
        assert!(sample_mask(16, -0.1, &mut r).is_err());
        // ties round to even
        assert_eq!(mask_count(10, 0.25), 2);
        assert_eq!(mask_count(10, 0.35), 4);
        assert_eq!(mask_count(2, 0.25), 0);
        assert_eq!(mask_count(6, 0.25), 2);
    }

    #[test]
    fn mask_golden_vector_seed_42() {
        let m = sample_mask(16, 0.75, &mut rng::seeded(42)).unwrap();
        assert_eq!(m.masked(), GOLDEN_MASK_SEED_42);
        assert_eq!(m.visible().len(), 4);
    }

    // Frozen output of the shuffle under xoshiro256** seeded by splitmix64(42),
    // cross-checked against a standalone implementation of the generator.
    const GOLDEN_MASK_SEED_42: &[usize] = &[0, 2, 3, 4, 6, 7, 8, 10, 11, 13, 14, 15];

    #[test]
    fn mask_spec_validation() {
        assert!(MaskSpec::new(vec![1, 1], 4).is_err());
        assert!(MaskSpec::new(vec![4], 4).is_err());
        let m = MaskSpec::new(vec![3, 0], 5).unwrap();
        assert_eq!(m.masked(), &[0, 3]);
        assert_eq!(m.visible(), vec![1, 2, 4]);
    }

    #[test]
    fn param_count_is_config_function() {
        let cfg = MaeConfig::default();
        let m = MaeModel::<f32>::new(cfg.clone(), 3).unwrap();
        assert_eq!(m.param_count(), cfg.param_count());
        let small = MaeConfig {
            encoder_depth: 1,
            mlp_ratio: 2,
            ..cfg
        };
        assert_eq!(MaeModel::<f32>::new(small.clone(), 9).unwrap().param_count(), small.param_count());
    }

    #[test]
    fn config_validation() {
        let ok = MaeConfig::default();
        assert!(ok.validate().is_ok());
        assert!(MaeConfig { patch_size: 5, ..ok.clone() }.validate().is_err());
        assert!(MaeConfig { mask_ratio: 1.0, ..ok.clone() }.validate().is_err());
        assert!(MaeConfig { encoder_dim: 62, ..ok }.validate().is_err());
    }
}
