use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tttlab::bench::{CorruptionKind, CorruptionSpec};
use tttlab::regimes::Regime;
use tttlab::ttt::SslTask;
use tttlab_cli::commands::{self, AlphaGrid, OptimizerChoice, PreviewOptions, TheoryOptions, TttEvalOptions};
use tttlab_cli::config::{self, RunConfig};
use tttlab_cli::CliResult;

/// Test-time training experiments at desk scale.
///
/// Set TTTLAB_THREADS to cap the number of worker threads.
#[derive(Parser)]
#[command(name = "tttlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (TOML); see configs/example.toml.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> CliResult<(RunConfig, PathBuf)> {
        let cfg = RunConfig::load(&self.config)?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Probe,
    #[value(alias = "fine-tune")]
    Finetune,
    Joint,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Regime {
        match r {
            RegimeArg::Probe => Regime::Probe,
            RegimeArg::Finetune => Regime::FineTune,
            RegimeArg::Joint => Regime::Joint,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SslArg {
    Mae,
    Rotation,
}

fn corruption(s: &str) -> Result<CorruptionSpec, String> {
    s.parse().map_err(|e: tttlab::Error| e.to_string())
}

fn kind(s: &str) -> Result<CorruptionKind, String> {
    s.parse().map_err(|e: tttlab::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the masked autoencoder on the training set.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a classification head on the pretrained encoder.
    TrainHead {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        regime: RegimeArg,
    },
    /// Test-time training on corrupted test images, one episode per image.
    TttEval {
        #[command(flatten)]
        run: RunArgs,
        /// Which `train-head` result to adapt.
        #[arg(long, value_enum, default_value = "probe")]
        regime: RegimeArg,
        /// kind:severity, repeatable; defaults to the config's list.
        #[arg(long = "corruption", value_parser = corruption)]
        corruptions: Vec<CorruptionSpec>,
        /// sgd or adamw, repeatable; defaults to `[ttt.optimizer]`.
        #[arg(long = "optimizer")]
        optimizers: Vec<OptimizerChoice>,
        #[arg(long)]
        steps: Option<usize>,
        /// Self-supervised task, repeatable; defaults to `ttt.ssl`.
        #[arg(long, value_enum)]
        ssl: Vec<SslArg>,
        /// Evaluate only the first N test images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Risk of test-time PCA in the linear model and the alignment derivative.
    Theory {
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 4.0)]
        sigma1: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        w: f64,
        /// Rotation of the top direction, as u₁ᵀRu₁ [default: 1/√2].
        #[arg(long, conflicts_with = "corruption_seed")]
        r11: Option<f64>,
        /// Random orthogonal corruption instead of `--r11`.
        #[arg(long)]
        corruption_seed: Option<u64>,
        /// Random eigenbasis instead of the identity.
        #[arg(long)]
        basis_seed: Option<u64>,
        /// start:stop:step or a comma-separated list, all in (0, 1].
        #[arg(long, default_value = "0.01:0.5:0.01")]
        alphas: AlphaGrid,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long, default_value_t = 100_000)]
        alignment_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Contact sheet (PGM) of every corruption at every severity.
    CorruptPreview {
        /// Corruption kind, repeatable; defaults to all.
        #[arg(long = "kind", value_parser = kind)]
        kinds: Vec<CorruptionKind>,
        #[arg(long, default_value_t = 4)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn show(path: &Path, v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
    eprintln!("wrote artifacts to {}", path.display());
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = config::threads()?;
    match cli.command {
        Command::Pretrain { run } => {
            let (cfg, out) = run.load()?;
            show(&out, &commands::pretrain(&cfg, &out)?);
        }
        Command::TrainHead { run, regime } => {
            let (cfg, out) = run.load()?;
            show(&out, &commands::train_head(&cfg, &out, regime.into())?);
        }
        Command::TttEval {
            run,
            regime,
            corruptions,
            optimizers,
            steps,
            ssl,
            limit,
        } => {
            let (cfg, out) = run.load()?;
            let opts = TttEvalOptions {
                regime: regime.into(),
                corruptions,
                optimizers,
                steps,
                ssl: ssl
                    .into_iter()
                    .map(|s| match s {
                        SslArg::Mae => SslTask::Mae,
                        SslArg::Rotation => SslTask::Rotation,
                    })
                    .collect(),
                limit,
            };
            let summary = commands::ttt_eval(&cfg, &out, &opts, threads)?;
            for e in &summary.entries {
                eprintln!(
                    "{:<40} baseline {:.4}  step {} {:.4}  gain {:+.4}",
                    e.label(),
                    e.baseline_accuracy,
                    summary.steps,
                    e.final_accuracy,
                    e.gain
                );
            }
            eprintln!("wrote artifacts to {}", out.display());
        }
        Command::Theory {
            d,
            sigma1,
            sigma,
            w,
            r11,
            corruption_seed,
            basis_seed,
            alphas,
            samples,
            alignment_samples,
            seed,
            out,
        } => {
            let opts = TheoryOptions {
                d,
                sigma1,
                sigma,
                w,
                r11: r11.unwrap_or(std::f64::consts::FRAC_1_SQRT_2),
                corruption_seed,
                basis_seed,
                alphas,
                samples,
                alignment_samples,
                seed,
            };
            let s = commands::theory(&opts, &out, threads)?;
            let t = &s.theorem;
            eprintln!(
                "r11 {:.4}: risk(0) {:.5} ± {:.5}, best risk({}) {:.5} ± {:.5} -> {}",
                s.r11,
                t.baseline.mean,
                t.baseline.se,
                t.best_alpha,
                t.best.mean,
                t.best.se,
                if t.pass { "dominated" } else { "not shown" }
            );
            if let Some(note) = &t.note {
                eprintln!("{note}");
            }
            let a = &s.alignment.report;
            eprintln!(
                "alignment derivative {:.5} ± {:.5}, closed form {:.5}",
                a.estimate.mean, a.estimate.se, a.closed_form
            );
            eprintln!("wrote artifacts to {}", out.display());
        }
        Command::CorruptPreview {
            kinds,
            images,
            seed,
            scale,
            out,
        } => {
            let path = commands::corrupt_preview(
                &PreviewOptions {
                    kinds,
                    images,
                    seed,
                    scale,
                },
                &out,
            )?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
