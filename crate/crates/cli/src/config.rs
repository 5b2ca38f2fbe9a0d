//! The run configuration: one TOML document that fully determines a run.
//! Every field is required; `configs/example.toml` lists them all with
//! comments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tttlab::bench::{self, CorruptionSpec};
use tttlab::data::Dataset;
use tttlab::regimes::{PretrainConfig, RegimeConfig};
use tttlab::ttt::TttConfig;
use tttlab::{MaeConfig, OptimizerConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model initialization, training order, augmentation and masks.
    pub seed: u64,
    /// Directory for every artifact; `--out` overrides it.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: MaeConfig,
    pub pretrain: PretrainConfig,
    pub head: RegimeConfig,
    pub ttt: TttConfig,
    pub optimizers: OptimizerChoices,
    pub evaluation: EvaluationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Shapeset {
        train_per_class: usize,
        test_per_class: usize,
        train_seed: u64,
        test_seed: u64,
    },
    Raw {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
    },
}

/// Optimizers selectable with `ttt-eval --optimizer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerChoices {
    pub sgd: OptimizerConfig,
    pub adamw: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub corruptions: Vec<CorruptionSpec>,
    /// Per-image corruption noise.
    pub corruption_seed: u64,
    /// Per-episode masks during test-time training.
    pub episode_seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.head.validate()?;
        self.ttt.validate()?;
        self.optimizers.sgd.validate()?;
        self.optimizers.adamw.validate()?;
        if self.optimizers.sgd.kind != tttlab::OptimizerKind::SgdMomentum {
            return Err(CliError::Config("optimizers.sgd must have kind = \"sgd-momentum\"".into()));
        }
        if self.optimizers.adamw.kind != tttlab::OptimizerKind::Adamw {
            return Err(CliError::Config("optimizers.adamw must have kind = \"adamw\"".into()));
        }
        if let DataConfig::Shapeset { train_per_class: 0, .. } = self.data {
            return Err(CliError::Config("data.train_per_class must be at least 1".into()));
        }
        Ok(())
    }

    /// Training and test sets. ShapeSet images are 32×32 with one channel,
    /// so the model config must match.
    pub fn datasets(&self) -> CliResult<(Dataset<f32>, Dataset<f32>)> {
        let (train, test) = match &self.data {
            DataConfig::Shapeset {
                train_per_class,
                test_per_class,
                train_seed,
                test_seed,
            } => (
                bench::gen_shapeset(*train_per_class, *train_seed),
                bench::gen_shapeset(*test_per_class, *test_seed),
            ),
            DataConfig::Raw {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => (
                bench::load_raw_dataset(train_images, train_labels, Some(*classes))?,
                bench::load_raw_dataset(test_images, test_labels, Some(*classes))?,
            ),
        };
        let want = [self.model.channels, self.model.image_size, self.model.image_size];
        for (name, d) in [("training", &train), ("test", &test)] {
            if let Some(s) = d.image_shape() {
                if s != want {
                    return Err(CliError::Config(format!(
                        "{name} images are {s:?} but the model expects {want:?}"
                    )));
                }
            }
        }
        Ok((train, test))
    }
}

/// Worker threads: `TTTLAB_THREADS` if set, else the available parallelism.
pub fn threads() -> CliResult<usize> {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("TTTLAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!("TTTLAB_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(avail),
    }
}

pub const EXAMPLE: &str = include_str!("../configs/example.toml");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_parses() {
        let cfg = RunConfig::parse(EXAMPLE).unwrap();
        assert_eq!(cfg.evaluation.corruptions.len(), 3);
    }

    #[test]
    fn missing_field_is_named() {
        let text = EXAMPLE.replace("patch_size = 8\n", "");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("patch_size"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = EXAMPLE.replacen("seed = ", "sed = 1\nseed = ", 1);
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("sed"), "{err}");
    }
}
