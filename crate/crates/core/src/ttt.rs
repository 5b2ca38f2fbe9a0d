//! Test-time training: adapt the encoder (and by default the decoder) on one
//! unlabeled input through a self-supervised loss, predict on the unmasked
//! input with the fixed main-task head, then discard the adapted weights.
//!
//! Every episode starts from a [`ModelSnapshot`] and is a pure function of
//! `(snapshot, image, config, seed)`.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{self, HeadModel};
use crate::mae::{self, patchify, sample_mask, MaeModel};
use crate::optim::{self, OptimizerConfig};
use crate::rng::{self, Prng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SslTask {
    Mae,
    Rotation,
}

impl SslTask {
    pub fn name(self) -> &'static str {
        match self {
            SslTask::Mae => "mae",
            SslTask::Rotation => "rotation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TttConfig {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub masked_copies: usize,
    pub mask_ratio: f64,
    pub train_decoder: bool,
    pub ssl: SslTask,
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig {
            steps: 20,
            optimizer: OptimizerConfig::sgd(5e-3, 0.9, 0.2),
            masked_copies: 32,
            mask_ratio: 0.75,
            train_decoder: true,
            ssl: SslTask::Mae,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.masked_copies == 0 {
            return Err(Error::Config("masked_copies must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        self.optimizer.validate()
    }
}

/// Frozen `f₀`, `g₀`, `h₀` (and optionally a rotation head). Optimizer state
/// is cleared on construction, so every episode starts from fresh buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot<T> {
    mae: MaeModel<T>,
    head: HeadModel<T>,
    rotation_head: Option<HeadModel<T>>,
}

impl<T: Scalar> ModelSnapshot<T> {
    pub fn new(mut mae: MaeModel<T>, mut head: HeadModel<T>) -> Self {
        mae.params.reset_state();
        head.params.reset_state();
        ModelSnapshot {
            mae,
            head,
            rotation_head: None,
        }
    }

    pub fn with_rotation_head(mut self, mut rot: HeadModel<T>) -> Result<Self> {
        if rot.classes != 4 {
            return Err(Error::Config(format!("rotation head must have 4 classes, has {}", rot.classes)));
        }
        rot.params.reset_state();
        self.rotation_head = Some(rot);
        Ok(self)
    }

    pub fn mae(&self) -> &MaeModel<T> {
        &self.mae
    }

    pub fn head(&self) -> &HeadModel<T> {
        &self.head
    }

    pub fn rotation_head(&self) -> Option<&HeadModel<T>> {
        self.rotation_head.as_ref()
    }

    /// Digest over all parameters and optimizer state.
    pub fn digest(&self) -> String {
        let mut s = format!(
            "{}{}{}{}",
            self.mae.params.digest(),
            self.mae.params.state_digest(),
            self.head.params.digest(),
            self.head.params.state_digest()
        );
        if let Some(r) = &self.rotation_head {
            s.push_str(&r.params.digest());
        }
        s
    }
}

/// Per-step record of one episode; index 0 is before any update. Equality
/// ignores `wall_time`.
#[derive(Clone, Debug, Serialize)]
pub struct EpisodeTrace {
    pub image_id: u64,
    pub label: Option<usize>,
    /// Self-supervised loss on the batch used at each step; the last entry
    /// is measured on one more batch after the final update.
    pub loss_ssl: Vec<f64>,
    /// Main-task cross-entropy on the unmasked input (needs a label).
    pub loss_main: Vec<Option<f64>>,
    pub pred: Vec<usize>,
    #[serde(skip)]
    pub wall_time: f64,
}

impl PartialEq for EpisodeTrace {
    fn eq(&self, o: &Self) -> bool {
        self.image_id == o.image_id
            && self.label == o.label
            && self.loss_ssl == o.loss_ssl
            && self.loss_main == o.loss_main
            && self.pred == o.pred
    }
}

impl EpisodeTrace {
    pub fn final_pred(&self) -> usize {
        *self.pred.last().expect("trace has step 0")
    }

    pub fn correct(&self, step: usize) -> Option<bool> {
        self.label.map(|y| self.pred[step] == y)
    }
}

/// Prediction of `h∘f` on one unmasked image and the cross-entropy against
/// `label` if given.
pub fn predict_one<T: Scalar>(
    mae: &MaeModel<T>,
    head: &HeadModel<T>,
    x: &Tensor<T>,
    label: Option<usize>,
) -> Result<(usize, Option<f64>)> {
    let (pred, loss) = head::predict(mae, head, &[x], &[label.unwrap_or(0)])?;
    Ok((pred[0], label.map(|_| loss[0].as_f64())))
}

/// Rotation sampling for the rotation-prediction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationMode {
    /// One rotation drawn uniformly from the generator.
    Sampled,
    /// All four rotations, one batch entry each, in order 0°, 90°, 180°, 270°.
    All,
}

/// Cross-entropy of predicting the applied multiple of 90° with `rot_head`
/// on top of the encoder.
pub fn rotation_ssl_loss<T: Scalar>(
    g: &mut Graph<T>,
    mae: &MaeModel<T>,
    rot_head: &HeadModel<T>,
    x: &Tensor<T>,
    mode: RotationMode,
    rng: &mut Prng,
) -> Result<Var> {
    let turns: Vec<usize> = match mode {
        RotationMode::Sampled => vec![rng::index(rng, 4)],
        RotationMode::All => (0..4).collect(),
    };
    let images = turns
        .iter()
        .map(|&k| data::rotate90(x, k))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = images.iter().collect();
    let tokens = mae.encode_full(g, &refs)?;
    let logits = rot_head.forward(g, tokens, refs.len(), mae.config.num_patches() + 1);
    Ok(g.softmax_cross_entropy(logits, &turns))
}

/// Records the self-supervised loss for one step on a fresh batch.
fn record_ssl<T: Scalar>(
    g: &mut Graph<T>,
    mae: &MaeModel<T>,
    rot_head: Option<&HeadModel<T>>,
    patches: &Tensor<T>,
    x: &Tensor<T>,
    cfg: &TttConfig,
    rng: &mut Prng,
) -> Result<Var> {
    match cfg.ssl {
        SslTask::Mae => {
            let masks = (0..cfg.masked_copies)
                .map(|_| sample_mask(mae.config.num_patches(), cfg.mask_ratio, rng))
                .collect::<Result<Vec<_>>>()?;
            let refs = vec![patches; cfg.masked_copies];
            mae.record_mae_loss_with_masks(g, &refs, &masks, mae.config.normalize_pixels)
        }
        SslTask::Rotation => {
            let rot = rot_head.ok_or_else(|| Error::Config("rotation TTT needs a rotation head".into()))?;
            rotation_ssl_loss(g, mae, rot, x, RotationMode::All, rng)
        }
    }
}

fn trainable_for(cfg: &TttConfig) -> fn(&str) -> bool {
    match (cfg.ssl, cfg.train_decoder) {
        (SslTask::Mae, true) => |n| !head::is_head_param(n) && !mae::is_fixed_param(n),
        // Decoder weights stay fixed; the tokens and the encoder still adapt.
        (SslTask::Mae, false) => |n| !head::is_head_param(n) && !mae::is_fixed_param(n) && !n.starts_with("decoder."),
        (SslTask::Rotation, _) => |n| mae::is_encoder_param(n) && !mae::is_fixed_param(n),
    }
}

/// Weight decay at test time covers weight matrices and the learned tokens;
/// biases and normalization parameters are exempt.
pub fn exempt_from_test_time_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.contains("norm")
}

/// Runs `cfg.steps` updates on `x` from the snapshot and returns the adapted
/// encoder/decoder with the episode trace. The head is never updated.
pub fn ttt_adapt<T: Scalar>(
    snapshot: &ModelSnapshot<T>,
    x: &Tensor<T>,
    label: Option<usize>,
    cfg: &TttConfig,
    rng: &mut Prng,
) -> Result<(MaeModel<T>, EpisodeTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = snapshot.mae.clone();
    let patches = patchify(x, model.config.patch_size)?;
    let rot = snapshot.rotation_head.as_ref();
    let mut trace = EpisodeTrace {
        image_id: 0,
        label,
        loss_ssl: Vec::with_capacity(cfg.steps + 1),
        loss_main: Vec::with_capacity(cfg.steps + 1),
        pred: Vec::with_capacity(cfg.steps + 1),
        wall_time: 0.0,
    };
    let trainable = trainable_for(cfg);
    for step in 0..=cfg.steps {
        let (pred, main) = predict_one(&model, &snapshot.head, x, label)?;
        trace.pred.push(pred);
        trace.loss_main.push(main);
        if step == cfg.steps {
            let mut g = Graph::inference();
            let loss = record_ssl(&mut g, &model, rot, &patches, x, cfg, rng)?;
            trace.loss_ssl.push(finite(g.scalar(loss)?.as_f64(), step)?);
            break;
        }
        let mut g = Graph::with_trainable(trainable);
        let loss = record_ssl(&mut g, &model, rot, &patches, x, cfg, rng)?;
        trace.loss_ssl.push(finite(g.scalar(loss)?.as_f64(), step)?);
        let grads = g.backward(loss)?;
        optim::step_with(&mut model.params, &grads, &cfg.optimizer, cfg.optimizer.lr, exempt_from_test_time_decay)?;
    }
    trace.wall_time = start.elapsed().as_secs_f64();
    Ok((model, trace))
}

fn finite(v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged(format!("self-supervised loss {v} at test-time step {step}")))
    }
}

/// Adapts, predicts with the adapted encoder and `h₀`, and drops the
/// adapted weights.
pub fn ttt_predict<T: Scalar>(
    snapshot: &ModelSnapshot<T>,
    x: &Tensor<T>,
    label: Option<usize>,
    cfg: &TttConfig,
    rng: &mut Prng,
) -> Result<(usize, EpisodeTrace)> {
    let (_, trace) = ttt_adapt(snapshot, x, label, cfg, rng)?;
    Ok((trace.final_pred(), trace))
}

/// Generator of the episode for image `id` under master `seed`.
pub fn episode_rng(seed: u64, id: u64) -> Prng {
    rng::seeded(rng::derive_seed(seed, id))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TttEvaluation {
    /// Accuracy at each step index over the whole set.
    pub accuracy: Vec<f64>,
    pub mean_loss_main: Vec<f64>,
    pub mean_loss_ssl: Vec<f64>,
    #[serde(skip)]
    pub traces: Vec<EpisodeTrace>,
}

impl TttEvaluation {
    pub fn baseline_accuracy(&self) -> f64 {
        self.accuracy[0]
    }

    pub fn final_accuracy(&self) -> f64 {
        *self.accuracy.last().unwrap()
    }

    pub fn best_accuracy(&self) -> f64 {
        self.accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rows `image_id,step,loss_recon,loss_main,pred,correct`.
    pub fn write_trace_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "image_id,step,loss_recon,loss_main,pred,correct")?;
        for t in &self.traces {
            for s in 0..t.pred.len() {
                let main = t.loss_main[s].map_or(String::new(), |v| format!("{v:.6}"));
                let correct = t.correct(s).map_or(String::new(), |c| (c as u8).to_string());
                writeln!(w, "{},{},{:.6},{},{},{}", t.image_id, s, t.loss_ssl[s], main, t.pred[s], correct)?;
            }
        }
        Ok(())
    }
}

/// Runs one independent episode per test image on up to `threads` workers.
/// Results depend only on `(snapshot, data, cfg, seed)`, not on the order of
/// the images or the number of workers.
pub fn evaluate_ttt<T: Scalar>(
    snapshot: &ModelSnapshot<T>,
    data: &Dataset<T>,
    cfg: &TttConfig,
    seed: u64,
    threads: usize,
) -> Result<TttEvaluation> {
    if data.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    cfg.validate()?;
    let n = data.len();
    let run = |i: usize| -> Result<EpisodeTrace> {
        let mut r = episode_rng(seed, data.ids[i]);
        let (_, mut t) = ttt_adapt(snapshot, &data.images[i], Some(data.labels[i]), cfg, &mut r)?;
        t.image_id = data.ids[i];
        Ok(t)
    };
    let threads = threads.clamp(1, n);
    let mut slots: Vec<Option<Result<EpisodeTrace>>> = (0..n).map(|_| None).collect();
    if threads == 1 {
        for (i, s) in slots.iter_mut().enumerate() {
            *s = Some(run(i));
        }
    } else {
        let chunk = n.div_ceil(threads);
        std::thread::scope(|scope| {
            for (c, part) in slots.chunks_mut(chunk).enumerate() {
                let run = &run;
                scope.spawn(move || {
                    for (j, s) in part.iter_mut().enumerate() {
                        *s = Some(run(c * chunk + j));
                    }
                });
            }
        });
    }
    let traces = slots.into_iter().map(|s| s.expect("every slot filled")).collect::<Result<Vec<_>>>()?;
    let steps = cfg.steps + 1;
    let mut accuracy = vec![0.0; steps];
    let mut mean_loss_main = vec![0.0; steps];
    let mut mean_loss_ssl = vec![0.0; steps];
    for t in &traces {
        for s in 0..steps {
            accuracy[s] += t.correct(s).unwrap_or(false) as u8 as f64;
            mean_loss_main[s] += t.loss_main[s].unwrap_or(f64::NAN);
            mean_loss_ssl[s] += t.loss_ssl[s];
        }
    }
    for v in [&mut accuracy, &mut mean_loss_main, &mut mean_loss_ssl] {
        for x in v.iter_mut() {
            *x /= n as f64;
        }
    }
    Ok(TttEvaluation {
        accuracy,
        mean_loss_main,
        mean_loss_ssl,
        traces,
    })
}
