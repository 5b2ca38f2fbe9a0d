//! Training before test time: masked-autoencoder pretraining on the source
//! set, then the main-task head under one of three regimes.
//!
//! * `probe`: only the head trains, the encoder is frozen.
//! * `fine-tune`: encoder and head train end to end; the decoder is untouched.
//! * `joint`: encoder, decoder and head train on the sum of the main-task and
//!   reconstruction losses, with fresh masks for the reconstruction branch.
//!
//! The only data augmentations are pad-and-crop and horizontal flips. Every
//! applied transform is logged in [`TrainReport::transforms`] so that the
//! audit can show that no benchmark corruption is reachable from training.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bench::CorruptionKind;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::{self, HeadKind, HeadModel};
use crate::mae::{self, MaeModel};
use crate::optim::{self, OptimizerConfig};
use crate::rng::{self, Prng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Probe,
    #[serde(alias = "finetune")]
    FineTune,
    Joint,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Probe => "probe",
            Regime::FineTune => "fine-tune",
            Regime::Joint => "joint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Linear warm-up, then cosine decay to zero at the last step.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    /// Zero padding on every side before a random crop back to full size.
    pub crop_pad: usize,
    pub hflip_prob: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            crop_pad: 2,
            hflip_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub warmup_epochs: usize,
    pub augmentation: Augmentation,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 40,
            batch_size: 64,
            optimizer: OptimizerConfig::adamw(1e-3, 0.05),
            schedule: Schedule::Cosine,
            warmup_epochs: 2,
            augmentation: Augmentation::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub head: HeadKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub warmup_epochs: usize,
    pub augmentation: Augmentation,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        RegimeConfig {
            regime: Regime::Probe,
            head: HeadKind::VitProbe,
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerConfig::adamw(1e-3, 0.05),
            schedule: Schedule::Cosine,
            warmup_epochs: 1,
            augmentation: Augmentation::default(),
        }
    }
}

fn check_loop(batch: usize, opt: &OptimizerConfig, aug: &Augmentation) -> Result<()> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&aug.hflip_prob) {
        return Err(Error::Config(format!("flip probability {} outside [0, 1]", aug.hflip_prob)));
    }
    opt.validate()
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_loop(self.batch_size, &self.optimizer, &self.augmentation)
    }
}

impl RegimeConfig {
    pub fn validate(&self) -> Result<()> {
        check_loop(self.batch_size, &self.optimizer, &self.augmentation)
    }
}

/// One row of the per-epoch metrics CSV; absent channels are left empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss_main: Option<f64>,
    pub loss_recon: Option<f64>,
    pub accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,split,loss_main,loss_recon,accuracy";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    /// Names of all data transforms applied during the run.
    pub transforms: BTreeSet<String>,
    pub steps: usize,
}

impl TrainReport {
    /// Fails if any applied transform is a benchmark corruption.
    pub fn audit(&self) -> Result<()> {
        for t in &self.transforms {
            if CorruptionKind::ALL.iter().any(|k| k.name() == t) {
                return Err(Error::Config(format!("corruption `{t}` reached a training pipeline")));
            }
        }
        Ok(())
    }

    pub fn write_metrics_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{METRICS_HEADER}")?;
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for m in &self.metrics {
            writeln!(
                w,
                "{},{},{},{},{}",
                m.epoch,
                m.split,
                f(m.loss_main),
                f(m.loss_recon),
                f(m.accuracy)
            )?;
        }
        Ok(())
    }
}

/// Random pad-and-crop plus horizontal flip. Draws come from its own stream.
pub struct Augmenter {
    cfg: Augmentation,
    rng: Prng,
    applied: BTreeSet<String>,
}

impl Augmenter {
    pub fn new(cfg: Augmentation, seed: u64) -> Self {
        Augmenter {
            cfg,
            rng: rng::seeded(seed),
            applied: BTreeSet::new(),
        }
    }

    pub fn apply<T: Scalar>(&mut self, image: &Tensor<T>) -> Tensor<T> {
        let mut out = image.clone();
        let p = self.cfg.crop_pad;
        if p > 0 {
            let dy = rng::index(&mut self.rng, 2 * p + 1) as isize - p as isize;
            let dx = rng::index(&mut self.rng, 2 * p + 1) as isize - p as isize;
            out = shift(&out, dy, dx);
            self.applied.insert("pad-crop".into());
        }
        if self.cfg.hflip_prob > 0.0 && rng::bernoulli(&mut self.rng, self.cfg.hflip_prob) {
            out = data::hflip(&out);
            self.applied.insert("horizontal-flip".into());
        }
        out
    }

    pub fn applied(&self) -> &BTreeSet<String> {
        &self.applied
    }
}

/// Zero-pad then crop at offset: output `(y, x)` reads input `(y+dy, x+dx)`.
fn shift<T: Scalar>(image: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let s = image.shape();
    let (h, w) = (s[1] as isize, s[2] as isize);
    let d = image.data();
    Tensor::from_fn(s, |i| {
        let i = i as isize;
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = (y + dy, x + dx);
        if (0..h).contains(&sy) && (0..w).contains(&sx) {
            d[((c * h + sy) * w + sx) as usize]
        } else {
            T::zero()
        }
    })
}

fn lr_at(base: f64, schedule: Schedule, step: usize, total: usize, warmup: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => optim::cosine_lr(base, step, total, warmup),
    }
}

fn batches(n: usize, batch: usize, rng: &mut Prng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(rng, &mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

// Stream identifiers for the independent generators of one run.
const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_EVAL_MASK: u64 = 4;

/// Mean masked reconstruction loss over a dataset with masks derived from
/// `seed`, no augmentation.
pub fn mean_recon_loss<T: Scalar>(model: &MaeModel<T>, data: &Dataset<T>, batch: usize, seed: u64) -> Result<f64> {
    let mut r = rng::seeded(seed);
    let mut total = 0.0;
    for chunk in data.images.chunks(batch.max(1)) {
        let mut g = Graph::inference();
        let refs: Vec<&Tensor<T>> = chunk.iter().collect();
        let (l, _) = model.record_mae_loss(
            &mut g,
            &refs,
            model.config.mask_ratio,
            &mut r,
            model.config.normalize_pixels,
        )?;
        total += g.scalar(l)?.as_f64() * chunk.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Trains encoder and decoder for reconstruction on the source set.
///
/// The returned report lists the mean training loss per epoch and, as epoch
/// 0, the loss of the initial model on the source set under fixed masks.
pub fn pretrain_mae<T: Scalar>(
    model: &mut MaeModel<T>,
    data: &Dataset<T>,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("pretraining needs a non-empty dataset".into()));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let eval_seed = rng::derive_seed(seed, STREAM_EVAL_MASK);
    report.metrics.push(EpochMetrics {
        epoch: 0,
        split: "source".into(),
        loss_main: None,
        loss_recon: Some(mean_recon_loss(model, data, cfg.batch_size, eval_seed)?),
        accuracy: None,
    });
    let mut order_rng = rng::seeded(rng::derive_seed(seed, STREAM_ORDER));
    let mut mask_rng = rng::seeded(rng::derive_seed(seed, STREAM_MASK));
    let mut aug = Augmenter::new(cfg.augmentation.clone(), rng::derive_seed(seed, STREAM_AUGMENT));
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs;
    let (ratio, norm) = (model.config.mask_ratio, model.config.normalize_pixels);
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for idx in batches(data.len(), cfg.batch_size, &mut order_rng) {
            let images: Vec<Tensor<T>> = idx.iter().map(|&i| aug.apply(&data.images[i])).collect();
            let refs: Vec<&Tensor<T>> = images.iter().collect();
            let mut g = Graph::with_trainable(|n| !mae::is_fixed_param(n));
            let (loss, _) = model.record_mae_loss(&mut g, &refs, ratio, &mut mask_rng, norm)?;
            let l = g.scalar(loss)?.as_f64();
            if !l.is_finite() {
                return Err(Error::Diverged(format!(
                    "reconstruction loss {l} at epoch {epoch}, step {}",
                    report.steps
                )));
            }
            let grads = g.backward(loss)?;
            let lr = lr_at(cfg.optimizer.lr, cfg.schedule, report.steps, total, warmup);
            optim::step_with_lr(&mut model.params, &grads, &cfg.optimizer, lr)?;
            report.steps += 1;
            sum += l * idx.len() as f64;
        }
        report.metrics.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss_main: None,
            loss_recon: Some(sum / data.len() as f64),
            accuracy: None,
        });
    }
    report.transforms = aug.applied().clone();
    Ok(report)
}

/// Accuracy and mean cross-entropy of `h∘f` on unmasked, unaugmented images.
pub fn evaluate<T: Scalar>(
    model: &MaeModel<T>,
    head: &HeadModel<T>,
    data: &Dataset<T>,
    batch: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Config("evaluation needs a non-empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (ims, ys) in data.images.chunks(batch.max(1)).zip(data.labels.chunks(batch.max(1))) {
        let refs: Vec<&Tensor<T>> = ims.iter().collect();
        let (pred, l) = head::predict(model, head, &refs, ys)?;
        correct += pred.iter().zip(ys).filter(|(p, y)| p == y).count();
        loss += l.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    Ok((correct as f64 / data.len() as f64, loss / data.len() as f64))
}

pub fn train_probe<T: Scalar>(
    model: &MaeModel<T>,
    head: &mut HeadModel<T>,
    data: &Dataset<T>,
    cfg: &RegimeConfig,
    seed: u64,
) -> Result<TrainReport> {
    if cfg.regime != Regime::Probe {
        return Err(Error::Config(format!("train_probe called with regime `{}`", cfg.regime.name())));
    }
    let mut frozen = model.clone();
    let report = run_head_training(&mut frozen, head, data, cfg, 0.0, seed)?;
    debug_assert_eq!(frozen.params, model.params);
    Ok(report)
}

pub fn train_finetune<T: Scalar>(
    model: &mut MaeModel<T>,
    head: &mut HeadModel<T>,
    data: &Dataset<T>,
    cfg: &RegimeConfig,
    seed: u64,
) -> Result<TrainReport> {
    if cfg.regime != Regime::FineTune {
        return Err(Error::Config(format!("train_finetune called with regime `{}`", cfg.regime.name())));
    }
    run_head_training(model, head, data, cfg, 0.0, seed)
}

pub fn train_joint<T: Scalar>(
    model: &mut MaeModel<T>,
    head: &mut HeadModel<T>,
    data: &Dataset<T>,
    cfg: &RegimeConfig,
    seed: u64,
) -> Result<TrainReport> {
    train_joint_weighted(model, head, data, cfg, 1.0, seed)
}

/// [`train_joint`] with the reconstruction loss scaled by `recon_weight`.
/// The public regime always uses weight 1; other weights exist to test the
/// reduction to fine-tuning.
pub fn train_joint_weighted<T: Scalar>(
    model: &mut MaeModel<T>,
    head: &mut HeadModel<T>,
    data: &Dataset<T>,
    cfg: &RegimeConfig,
    recon_weight: f64,
    seed: u64,
) -> Result<TrainReport> {
    if cfg.regime != Regime::Joint {
        return Err(Error::Config(format!("train_joint called with regime `{}`", cfg.regime.name())));
    }
    run_head_training(model, head, data, cfg, recon_weight, seed)
}

/// Dispatches on `cfg.regime`. Probing never modifies `model`.
pub fn train_head<T: Scalar>(
    model: &mut MaeModel<T>,
    head: &mut HeadModel<T>,
    data: &Dataset<T>,
    cfg: &RegimeConfig,
    seed: u64,
) -> Result<TrainReport> {
    match cfg.regime {
        Regime::Probe => train_probe(model, head, data, cfg, seed),
        Regime::FineTune => train_finetune(model, head, data, cfg, seed),
        Regime::Joint => train_joint(model, head, data, cfg, seed),
    }
}

fn run_head_training<T: Scalar>(
    model: &mut MaeModel<T>,
    head: &mut HeadModel<T>,
    data: &Dataset<T>,
    cfg: &RegimeConfig,
    recon_weight: f64,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("head training needs a non-empty dataset".into()));
    }
    if data.classes != head.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, head predicts {}",
            data.classes, head.classes
        )));
    }
    let regime = cfg.regime;
    let trainable: fn(&str) -> bool = match regime {
        Regime::Probe => head::is_head_param,
        Regime::FineTune => |n| head::is_head_param(n) || (mae::is_encoder_param(n) && !mae::is_fixed_param(n)),
        Regime::Joint => |n| !mae::is_fixed_param(n),
    };
    let mut report = TrainReport::default();
    let mut order_rng = rng::seeded(rng::derive_seed(seed, STREAM_ORDER));
    let mut mask_rng = rng::seeded(rng::derive_seed(seed, STREAM_MASK));
    let mut aug = Augmenter::new(cfg.augmentation.clone(), rng::derive_seed(seed, STREAM_AUGMENT));
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs;
    let seq = model.config.num_patches() + 1;
    for epoch in 1..=cfg.epochs {
        let (mut main_sum, mut recon_sum, mut correct) = (0.0, 0.0, 0usize);
        for idx in batches(data.len(), cfg.batch_size, &mut order_rng) {
            let images: Vec<Tensor<T>> = idx.iter().map(|&i| aug.apply(&data.images[i])).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let refs: Vec<&Tensor<T>> = images.iter().collect();
            let mut g = Graph::with_trainable(trainable);
            let tokens = model.encode_full(&mut g, &refs)?;
            let logits = head.forward(&mut g, tokens, refs.len(), seq);
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(b, &y)| head::argmax(g.value(logits).row(b)) == y)
                .count();
            let main = g.softmax_cross_entropy(logits, &labels);
            let mut loss = main;
            if regime == Regime::Joint {
                let (recon, _) = model.record_mae_loss(
                    &mut g,
                    &refs,
                    model.config.mask_ratio,
                    &mut mask_rng,
                    model.config.normalize_pixels,
                )?;
                recon_sum += g.scalar(recon)?.as_f64() * idx.len() as f64;
                let weighted = g.scale(recon, T::lit(recon_weight));
                loss = g.add(main, weighted);
            }
            let l = g.scalar(loss)?.as_f64();
            if !l.is_finite() {
                return Err(Error::Diverged(format!(
                    "{} loss {l} at epoch {epoch}, step {}",
                    regime.name(),
                    report.steps
                )));
            }
            main_sum += g.scalar(main)?.as_f64() * idx.len() as f64;
            let grads = g.backward(loss)?;
            let lr = lr_at(cfg.optimizer.lr, cfg.schedule, report.steps, total, warmup);
            let (head_grads, model_grads) = split_grads(grads);
            optim::step_with_lr(&mut head.params, &head_grads, &cfg.optimizer, lr)?;
            if regime != Regime::Probe {
                optim::step_with_lr(&mut model.params, &model_grads, &cfg.optimizer, lr)?;
            }
            report.steps += 1;
        }
        let n = data.len() as f64;
        report.metrics.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss_main: Some(main_sum / n),
            loss_recon: (regime == Regime::Joint).then_some(recon_sum / n),
            accuracy: Some(correct as f64 / n),
        });
    }
    report.transforms = aug.applied().clone();
    Ok(report)
}

fn split_grads<T: Scalar>(grads: crate::params::Gradients<T>) -> (crate::params::Gradients<T>, crate::params::Gradients<T>) {
    let mut h = crate::params::Gradients::new();
    let mut m = crate::params::Gradients::new();
    for (name, g) in grads.iter() {
        if head::is_head_param(name) {
            h.insert(name, g.clone());
        } else {
            m.insert(name, g.clone());
        }
    }
    (h, m)
}

/// Trains a 4-way rotation classifier on frozen encoder features, using all
/// four rotations of every (augmented) source image per step.
pub fn train_rotation_head<T: Scalar>(
    model: &MaeModel<T>,
    kind: HeadKind,
    data: &Dataset<T>,
    cfg: &RegimeConfig,
    seed: u64,
) -> Result<(HeadModel<T>, TrainReport)> {
    cfg.validate()?;
    let rotated = |im: &Tensor<T>| -> Result<Vec<Tensor<T>>> { (0..4).map(|k| data::rotate90(im, k)).collect() };
    let mut head = HeadModel::new(kind, model.config.encoder_dim, 4, rng::derive_seed(seed, 7))?;
    let mut report = TrainReport::default();
    let mut order_rng = rng::seeded(rng::derive_seed(seed, STREAM_ORDER));
    let mut aug = Augmenter::new(cfg.augmentation.clone(), rng::derive_seed(seed, STREAM_AUGMENT));
    // Four rotated copies per image, so a quarter of the images per batch.
    let per_batch = cfg.batch_size.div_ceil(4).max(1);
    let per_epoch = data.len().div_ceil(per_batch);
    let total = per_epoch * cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs;
    let seq = model.config.num_patches() + 1;
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut correct, mut count) = (0.0, 0usize, 0usize);
        for idx in batches(data.len(), per_batch, &mut order_rng) {
            let mut images = Vec::with_capacity(4 * idx.len());
            for &i in &idx {
                images.extend(rotated(&aug.apply(&data.images[i]))?);
            }
            let labels: Vec<usize> = (0..images.len()).map(|i| i % 4).collect();
            let refs: Vec<&Tensor<T>> = images.iter().collect();
            let mut g = Graph::with_trainable(head::is_head_param);
            let tokens = model.encode_full(&mut g, &refs)?;
            let logits = head.forward(&mut g, tokens, refs.len(), seq);
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(b, &y)| head::argmax(g.value(logits).row(b)) == y)
                .count();
            let loss = g.softmax_cross_entropy(logits, &labels);
            let l = g.scalar(loss)?.as_f64();
            if !l.is_finite() {
                return Err(Error::Diverged(format!("rotation loss {l} at epoch {epoch}")));
            }
            loss_sum += l * refs.len() as f64;
            count += refs.len();
            let grads = g.backward(loss)?;
            let lr = lr_at(cfg.optimizer.lr, cfg.schedule, report.steps, total, warmup);
            optim::step_with_lr(&mut head.params, &grads, &cfg.optimizer, lr)?;
            report.steps += 1;
        }
        report.metrics.push(EpochMetrics {
            epoch,
            split: "rotation".into(),
            loss_main: Some(loss_sum / count as f64),
            loss_recon: None,
            accuracy: Some(correct as f64 / count as f64),
        });
    }
    report.transforms = aug.applied().clone();
    Ok((head, report))
}
