//! Main-task heads on top of the encoder.
//!
//! `vit-probe` projects encoder tokens to width 64, runs two transformer
//! blocks and classifies the class-token row. `linear-probe` averages the
//! patch tokens and applies one affine map. All parameters live under the
//! `head.` prefix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mae::MaeModel;
use crate::nn;
use crate::params::ParamSet;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const VIT_PROBE_DIM: usize = 64;
pub const VIT_PROBE_DEPTH: usize = 2;
pub const VIT_PROBE_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    LinearProbe,
    VitProbe,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::LinearProbe => "linear-probe",
            HeadKind::VitProbe => "vit-probe",
        }
    }
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel<T> {
    pub kind: HeadKind,
    pub classes: usize,
    pub params: ParamSet<T>,
}

impl<T: Scalar> HeadModel<T> {
    pub fn new(kind: HeadKind, encoder_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("a head needs at least 2 classes, got {classes}")));
        }
        let mut rng = rng::seeded(seed);
        let mut p = ParamSet::new();
        match kind {
            HeadKind::LinearProbe => nn::init_linear(&mut p, &mut rng, "head.fc", encoder_dim, classes),
            HeadKind::VitProbe => {
                nn::init_linear(&mut p, &mut rng, "head.proj", encoder_dim, VIT_PROBE_DIM);
                for i in 0..VIT_PROBE_DEPTH {
                    nn::init_block(&mut p, &mut rng, &format!("head.blocks.{i}"), VIT_PROBE_DIM, 4);
                }
                nn::init_norm(&mut p, "head.norm", VIT_PROBE_DIM);
                nn::init_linear(&mut p, &mut rng, "head.fc", VIT_PROBE_DIM, classes);
            }
        }
        Ok(HeadModel { kind, classes, params: p })
    }

    /// Rebuilds a head from stored parameters; `kind` and the class count are
    /// read off the parameter layout.
    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let fc = params
            .get("head.fc.weight")
            .ok_or_else(|| Error::Format("head checkpoint lacks `head.fc.weight`".into()))?;
        let classes = fc.cols();
        let (kind, dim) = match params.get("head.proj.weight") {
            Some(w) => (HeadKind::VitProbe, w.rows()),
            None => (HeadKind::LinearProbe, fc.rows()),
        };
        let template = Self::new(kind, dim, classes, 0)?;
        crate::mae::check_layout(&template.params, &params)?;
        Ok(HeadModel { kind, classes, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Logits `[batch, classes]` from encoder tokens `[batch·seq, D]`, where
    /// row 0 of each sequence is the class token.
    pub fn forward(&self, g: &mut Graph<T>, tokens: Var, batch: usize, seq: usize) -> Var {
        match self.kind {
            HeadKind::LinearProbe => {
                let rows = (0..batch)
                    .flat_map(|b| (1..seq).map(move |i| (0, (b * seq + i) as u32)))
                    .collect();
                let patches = g.select_rows(&[tokens], rows);
                let pooled = g.mean_groups(patches, batch);
                nn::linear(g, &self.params, "head.fc", pooled)
            }
            HeadKind::VitProbe => {
                let mut x = nn::linear(g, &self.params, "head.proj", tokens);
                for i in 0..VIT_PROBE_DEPTH {
                    x = nn::block(g, &self.params, &format!("head.blocks.{i}"), x, batch, seq, VIT_PROBE_HEADS);
                }
                let x = nn::layer_norm(g, &self.params, "head.norm", x);
                let cls = g.select_rows(&[x], (0..batch).map(|b| (0, (b * seq) as u32)).collect());
                nn::linear(g, &self.params, "head.fc", cls)
            }
        }
    }
}

/// Records `h∘f(x)` on unmasked images and returns the logits.
pub fn record_logits<T: Scalar>(
    g: &mut Graph<T>,
    mae: &MaeModel<T>,
    head: &HeadModel<T>,
    images: &[&Tensor<T>],
) -> Result<Var> {
    let tokens = mae.encode_full(g, images)?;
    Ok(head.forward(g, tokens, images.len(), mae.config.num_patches() + 1))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predictions and mean cross-entropy of `h∘f` on a batch (no gradients).
pub fn predict<T: Scalar>(
    mae: &MaeModel<T>,
    head: &HeadModel<T>,
    images: &[&Tensor<T>],
    labels: &[usize],
) -> Result<(Vec<usize>, Vec<T>)> {
    let mut g = Graph::inference();
    let logits = record_logits(&mut g, mae, head, images)?;
    g.check()?;
    let lt = g.value(logits);
    let mut preds = Vec::with_capacity(images.len());
    let mut losses = Vec::with_capacity(images.len());
    for (b, &y) in labels.iter().enumerate() {
        let row = lt.row(b);
        preds.push(argmax(row));
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lz = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        losses.push(lz - row[y]);
    }
    Ok((preds, losses))
}
