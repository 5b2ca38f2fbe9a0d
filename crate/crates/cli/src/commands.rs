//! The subcommands as library functions. Each writes its artifacts below
//! `out` and returns the same summary it stores as JSON.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::Value;
use tttlab::bench::{self, CorruptionKind, CorruptionSpec};
use tttlab::head::HeadModel;
use tttlab::regimes::{self, Regime, TrainReport};
use tttlab::rng;
use tttlab::theory::{self, AlignmentReport, Basis, Corruption, TheoremReport};
use tttlab::ttt::{self, ModelSnapshot, SslTask, TttEvaluation};
use tttlab::{MaeModel, OptimizerConfig, ParamSet};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::plot::{self, Series};
use crate::provenance::{write_csv, write_json, write_text, Provenance};

pub const MAE_CHECKPOINT: &str = "mae.tttl";
/// Batch size for clean-set evaluation; it does not affect results.
const EVAL_BATCH: usize = 64;
const STREAM_HEAD_INIT: u64 = 11;
const STREAM_ROTATION: u64 = 12;
const STREAM_ALIGNMENT: u64 = 3;
const STREAM_ANGLE: u64 = 2;

fn metrics_csv(report: &TrainReport) -> CliResult<String> {
    let mut buf = Vec::new();
    report.write_metrics_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("ascii"))
}

fn load_mae(cfg: &RunConfig, path: &Path) -> CliResult<MaeModel<f32>> {
    if !path.exists() {
        return Err(CliError::Io(format!(
            "{} not found; run `tttlab pretrain` with the same --out first",
            path.display()
        )));
    }
    Ok(MaeModel::load(cfg.model.clone(), path)?)
}

fn load_head(path: &Path) -> CliResult<HeadModel<f32>> {
    if !path.exists() {
        return Err(CliError::Io(format!(
            "{} not found; run `tttlab train-head` with the same --out first",
            path.display()
        )));
    }
    Ok(HeadModel::from_params(ParamSet::load(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub checkpoint: String,
    pub digest: String,
    pub param_count: usize,
    pub steps: usize,
    pub final_train_loss: Option<f64>,
    /// Reconstruction loss on the clean test set under fixed masks.
    pub test_recon_loss: f64,
    pub transforms: Vec<String>,
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> CliResult<PretrainSummary> {
    let prov = Provenance::new("pretrain", cfg, &Value::Null)?;
    let (train, test) = cfg.datasets()?;
    let mut model = MaeModel::new(cfg.model.clone(), cfg.seed)?;
    let report = regimes::pretrain_mae(&mut model, &train, &cfg.pretrain, cfg.seed)?;
    report.audit()?;
    let test_recon_loss = regimes::mean_recon_loss(&model, &test, EVAL_BATCH, cfg.seed)?;
    std::fs::create_dir_all(out)?;
    model.save(out.join(MAE_CHECKPOINT))?;
    write_csv(&out.join("pretrain_metrics.csv"), &prov, &metrics_csv(&report)?)?;
    let summary = PretrainSummary {
        checkpoint: MAE_CHECKPOINT.into(),
        digest: model.params.digest(),
        param_count: model.param_count(),
        steps: report.steps,
        final_train_loss: report.metrics.last().and_then(|m| m.loss_recon),
        test_recon_loss,
        transforms: report.transforms.iter().cloned().collect(),
    };
    write_json(&out.join("pretrain.json"), &prov, &summary)?;
    Ok(summary)
}

/// Head checkpoint written by `train-head --regime r`.
pub fn head_checkpoint(regime: Regime) -> String {
    format!("head-{}.tttl", regime.name())
}

/// Encoder/decoder used with the head of `regime`: the pretrained model for
/// probing, the regime's own copy otherwise.
pub fn mae_checkpoint(regime: Regime) -> String {
    match regime {
        Regime::Probe => MAE_CHECKPOINT.into(),
        r => format!("mae-{}.tttl", r.name()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadSummary {
    pub regime: Regime,
    pub head: String,
    pub head_checkpoint: String,
    pub mae_checkpoint: String,
    pub head_param_count: usize,
    pub head_digest: String,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
    pub clean_test_accuracy: f64,
    pub clean_test_loss: f64,
    pub transforms: Vec<String>,
}

fn encoder_digest(m: &MaeModel<f32>) -> String {
    m.params.digest_prefix("encoder.") + &m.params.digest_prefix("cls_token")
}

pub fn train_head(cfg: &RunConfig, out: &Path, regime: Regime) -> CliResult<HeadSummary> {
    let mut rc = cfg.head.clone();
    rc.regime = regime;
    let prov = Provenance::new("train-head", cfg, &serde_json::json!({ "regime": regime }))?;
    let (train, test) = cfg.datasets()?;
    let mut model = load_mae(cfg, &out.join(MAE_CHECKPOINT))?;
    let before = encoder_digest(&model);
    let mut head = HeadModel::new(
        rc.head,
        cfg.model.encoder_dim,
        train.classes,
        rng::derive_seed(cfg.seed, STREAM_HEAD_INIT),
    )?;
    let report = regimes::train_head(&mut model, &mut head, &train, &rc, cfg.seed)?;
    report.audit()?;
    let (acc, loss) = regimes::evaluate(&model, &head, &test, EVAL_BATCH)?;
    let (hc, mc) = (head_checkpoint(regime), mae_checkpoint(regime));
    head.params.save(out.join(&hc))?;
    if regime != Regime::Probe {
        model.save(out.join(&mc))?;
    }
    let stem = format!("head-{}", regime.name());
    write_csv(&out.join(format!("{stem}_metrics.csv")), &prov, &metrics_csv(&report)?)?;
    let summary = HeadSummary {
        regime,
        head: rc.head.name().into(),
        head_checkpoint: hc,
        mae_checkpoint: mc,
        head_param_count: head.param_count(),
        head_digest: head.params.digest(),
        encoder_digest_before: before,
        encoder_digest_after: encoder_digest(&model),
        clean_test_accuracy: acc,
        clean_test_loss: loss,
        transforms: report.transforms.iter().cloned().collect(),
    };
    write_json(&out.join(format!("{stem}.json")), &prov, &summary)?;
    Ok(summary)
}

/// `--optimizer` choice for `ttt-eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerChoice {
    /// `[ttt.optimizer]` from the config.
    Config,
    Sgd,
    Adamw,
}

impl OptimizerChoice {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerChoice::Config => "config",
            OptimizerChoice::Sgd => "sgd",
            OptimizerChoice::Adamw => "adamw",
        }
    }

    fn resolve(self, cfg: &RunConfig) -> OptimizerConfig {
        match self {
            OptimizerChoice::Config => cfg.ttt.optimizer.clone(),
            OptimizerChoice::Sgd => cfg.optimizers.sgd.clone(),
            OptimizerChoice::Adamw => cfg.optimizers.adamw.clone(),
        }
    }
}

impl FromStr for OptimizerChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerChoice::Sgd),
            "adamw" => Ok(OptimizerChoice::Adamw),
            _ => Err(format!("unknown optimizer `{s}` (expected sgd or adamw)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TttEvalOptions {
    pub regime: Regime,
    /// Empty means the config's list.
    pub corruptions: Vec<CorruptionSpec>,
    /// Empty means `[ttt.optimizer]`.
    pub optimizers: Vec<OptimizerChoice>,
    pub steps: Option<usize>,
    /// Empty means `ttt.ssl`.
    pub ssl: Vec<SslTask>,
    /// Evaluate only the first `n` test images.
    pub limit: Option<usize>,
}

impl Default for TttEvalOptions {
    fn default() -> Self {
        TttEvalOptions {
            regime: Regime::Probe,
            corruptions: Vec::new(),
            optimizers: Vec::new(),
            steps: None,
            ssl: Vec::new(),
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TttEntry {
    pub corruption: CorruptionSpec,
    pub optimizer: String,
    pub ssl: SslTask,
    pub images: usize,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub gain: f64,
    /// Share of images whose self-supervised loss ended below its start.
    pub ssl_decreased: f64,
    pub accuracy: Vec<f64>,
    pub mean_loss_main: Vec<f64>,
    pub mean_loss_ssl: Vec<f64>,
    pub trace_file: String,
}

impl TttEntry {
    fn new(spec: CorruptionSpec, optimizer: &str, ssl: SslTask, ev: &TttEvaluation, trace_file: String) -> Self {
        let down = ev
            .traces
            .iter()
            .filter(|t| t.loss_ssl.last() < t.loss_ssl.first())
            .count();
        TttEntry {
            corruption: spec,
            optimizer: optimizer.into(),
            ssl,
            images: ev.traces.len(),
            baseline_accuracy: ev.baseline_accuracy(),
            final_accuracy: ev.final_accuracy(),
            best_accuracy: ev.best_accuracy(),
            gain: ev.final_accuracy() - ev.baseline_accuracy(),
            ssl_decreased: down as f64 / ev.traces.len() as f64,
            accuracy: ev.accuracy.clone(),
            mean_loss_main: ev.mean_loss_main.clone(),
            mean_loss_ssl: ev.mean_loss_ssl.clone(),
            trace_file,
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{} {}", self.ssl.name(), self.optimizer, self.corruption)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TttSummary {
    pub regime: Regime,
    pub steps: usize,
    pub entries: Vec<TttEntry>,
}

fn file_key(spec: CorruptionSpec) -> String {
    format!("{}-{}", spec.kind.name(), spec.severity)
}

pub fn ttt_eval(cfg: &RunConfig, out: &Path, opts: &TttEvalOptions, threads: usize) -> CliResult<TttSummary> {
    let prov = Provenance::new("ttt-eval", cfg, opts)?;
    let corruptions = if opts.corruptions.is_empty() {
        cfg.evaluation.corruptions.clone()
    } else {
        opts.corruptions.clone()
    };
    if corruptions.is_empty() {
        return Err(CliError::Config("no corruptions requested".into()));
    }
    let optimizers = if opts.optimizers.is_empty() {
        vec![OptimizerChoice::Config]
    } else {
        opts.optimizers.clone()
    };
    let ssls = if opts.ssl.is_empty() { vec![cfg.ttt.ssl] } else { opts.ssl.clone() };
    let steps = opts.steps.unwrap_or(cfg.ttt.steps);

    let (train, mut test) = cfg.datasets()?;
    if let Some(n) = opts.limit {
        let keep: Vec<usize> = (0..n.min(test.len())).collect();
        test = test.select(&keep);
    }
    let mae = load_mae(cfg, &out.join(mae_checkpoint(opts.regime)))?;
    let head = load_head(&out.join(head_checkpoint(opts.regime)))?;
    let mut snapshot = ModelSnapshot::new(mae, head);
    if ssls.contains(&SslTask::Rotation) {
        let (rot, report) = regimes::train_rotation_head(
            snapshot.mae(),
            cfg.head.head,
            &train,
            &cfg.head,
            rng::derive_seed(cfg.seed, STREAM_ROTATION),
        )?;
        report.audit()?;
        rot.params.save(out.join("rotation-head.tttl"))?;
        write_csv(&out.join("rotation-head_metrics.csv"), &prov, &metrics_csv(&report)?)?;
        snapshot = snapshot.with_rotation_head(rot)?;
    }

    let mut entries = Vec::new();
    for &spec in &corruptions {
        let data = bench::corrupt_dataset(&test, spec, cfg.evaluation.corruption_seed)?;
        for &ssl in &ssls {
            for &opt in &optimizers {
                let tc = ttt::TttConfig {
                    steps,
                    optimizer: opt.resolve(cfg),
                    ssl,
                    ..cfg.ttt.clone()
                };
                let ev = ttt::evaluate_ttt(&snapshot, &data, &tc, cfg.evaluation.episode_seed, threads)?;
                let file = format!("ttt_trace_{}_{}_{}.csv", ssl.name(), opt.name(), file_key(spec));
                let mut buf = Vec::new();
                ev.write_trace_csv(&mut buf)?;
                write_csv(&out.join(&file), &prov, &String::from_utf8(buf).expect("ascii"))?;
                entries.push(TttEntry::new(spec, opt.name(), ssl, &ev, file));
            }
        }
    }
    let summary = TttSummary {
        regime: opts.regime,
        steps,
        entries,
    };

    let mut curves = String::from("ssl,optimizer,corruption,step,accuracy,mean_loss_main,mean_loss_ssl\n");
    let mut table = String::from("corruption,optimizer,ssl,images,baseline_accuracy,final_accuracy,best_accuracy,gain\n");
    for e in &summary.entries {
        for s in 0..e.accuracy.len() {
            curves += &format!(
                "{},{},{},{},{:.6},{:.6},{:.6}\n",
                e.ssl.name(),
                e.optimizer,
                e.corruption,
                s,
                e.accuracy[s],
                e.mean_loss_main[s],
                e.mean_loss_ssl[s]
            );
        }
        table += &format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            e.corruption,
            e.optimizer,
            e.ssl.name(),
            e.images,
            e.baseline_accuracy,
            e.final_accuracy,
            e.best_accuracy,
            e.gain
        );
    }
    write_csv(&out.join("ttt_curves.csv"), &prov, &curves)?;
    write_csv(&out.join("ttt_comparison.csv"), &prov, &table)?;
    let series: Vec<Series> = summary
        .entries
        .iter()
        .map(|e| Series::new(e.label(), e.accuracy.iter().enumerate().map(|(s, &a)| (s as f64, a)).collect()))
        .collect();
    let svg = plot::line_plot(
        "Accuracy during test-time training",
        "step",
        "accuracy",
        &series,
        &prov.xml_comment(),
    );
    write_text(&out.join("ttt_accuracy.svg"), &svg)?;
    write_json(&out.join("ttt_summary.json"), &prov, &summary)?;
    Ok(summary)
}

/// Grid of positive `α` values: `start:stop:step` or a comma-separated list.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct AlphaGrid(pub Vec<f64>);

impl FromStr for AlphaGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{t}` is not a number in alpha grid `{s}`"))
        };
        let values = if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            let [a, b, h] = parts[..] else {
                return Err(format!("alpha range `{s}` must be start:stop:step"));
            };
            let (a, b, h) = (num(a)?, num(b)?, num(h)?);
            if !(h > 0.0) || b < a {
                return Err(format!("alpha range `{s}` needs step > 0 and stop >= start"));
            }
            let n = ((b - a) / h + 1e-9).floor() as usize;
            // rounding keeps `0.01:0.5:0.01` equal to the hundredths
            (0..=n).map(|k| ((a + k as f64 * h) * 1e12).round() / 1e12).collect()
        } else {
            s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
        };
        if values.is_empty() {
            return Err("empty alpha grid".into());
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(format!("alpha {v} outside (0, 1]"));
        }
        Ok(AlphaGrid(values))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryOptions {
    pub d: usize,
    pub sigma1: f64,
    pub sigma: f64,
    pub w: f64,
    /// Rotation angle `arccos(r11)` in the plane of `u₁`; ignored when
    /// `corruption_seed` is set.
    pub r11: f64,
    /// Random orthogonal corruption instead of a fixed angle.
    pub corruption_seed: Option<u64>,
    /// Random eigenbasis; the identity if absent.
    pub basis_seed: Option<u64>,
    pub alphas: AlphaGrid,
    pub samples: usize,
    pub alignment_samples: usize,
    pub seed: u64,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        TheoryOptions {
            d: 8,
            sigma1: 4.0,
            sigma: 1.0,
            w: 1.0,
            r11: std::f64::consts::FRAC_1_SQRT_2,
            corruption_seed: None,
            basis_seed: None,
            alphas: AlphaGrid(theory::default_alpha_grid()),
            samples: 20_000,
            alignment_samples: 100_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentSummary {
    #[serde(flatten)]
    pub report: AlignmentReport,
    /// `|estimate − closed form| / se`.
    pub z: f64,
    pub within_3se: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheorySummary {
    pub r11: f64,
    pub theorem: TheoremReport,
    pub alignment: AlignmentSummary,
}

pub fn theory(opts: &TheoryOptions, out: &Path, threads: usize) -> CliResult<TheorySummary> {
    let prov = Provenance::new("theory", &Value::Null, opts)?;
    let basis = opts.basis_seed.map_or(Basis::Identity, |seed| Basis::Random { seed });
    let corruption = match opts.corruption_seed {
        Some(seed) => Corruption::Random { seed },
        None => Corruption::Angle {
            r11: opts.r11,
            seed: rng::derive_seed(opts.seed, STREAM_ANGLE),
        },
    };
    let world = theory::make_world(opts.d, opts.sigma1, opts.sigma, opts.w, basis, corruption)?;
    let report = theory::theorem_check(&world, &opts.alphas.0, opts.samples, opts.seed, threads)?;
    let align = theory::alignment_derivative(
        &world,
        opts.alignment_samples,
        rng::derive_seed(opts.seed, STREAM_ALIGNMENT),
        threads,
    )?;
    let z = (align.estimate.mean - align.closed_form).abs() / align.estimate.se;
    let summary = TheorySummary {
        r11: world.r11(),
        alignment: AlignmentSummary {
            report: align,
            z,
            within_3se: align.within(3.0),
        },
        theorem: report,
    };

    let t = &summary.theorem;
    let mut csv = String::from("alpha,risk,se\n");
    csv += &format!("0,{:.9},{:.9}\n", t.baseline.mean, t.baseline.se);
    for (a, e) in t.alphas.iter().zip(&t.risks) {
        csv += &format!("{a},{:.9},{:.9}\n", e.mean, e.se);
    }
    write_csv(&out.join("theory_risk.csv"), &prov, &csv)?;
    let mut pts = vec![(0.0, t.baseline.mean)];
    pts.extend(t.alphas.iter().zip(&t.risks).map(|(&a, e)| (a, e.mean)));
    let svg = plot::line_plot(
        &format!("Risk of test-time PCA, r11 = {:.3}", summary.r11),
        "alpha",
        "risk",
        &[Series::new("Monte Carlo risk", pts)],
        &prov.xml_comment(),
    );
    write_text(&out.join("theory_risk.svg"), &svg)?;
    write_json(&out.join("theory.json"), &prov, &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreviewOptions {
    /// Empty means every kind.
    pub kinds: Vec<CorruptionKind>,
    pub images: usize,
    pub seed: u64,
    /// Pixel replication factor.
    pub scale: usize,
}

impl Default for PreviewOptions {
    fn default() -> Self {
        PreviewOptions {
            kinds: Vec::new(),
            images: 4,
            seed: 0,
            scale: 2,
        }
    }
}

const GAP: usize = 2;

/// Contact sheet: one row per (image, kind), columns clean then severities
/// 1 to 5. Returns the path written.
pub fn corrupt_preview(opts: &PreviewOptions, out: &Path) -> CliResult<PathBuf> {
    let prov = Provenance::new("corrupt-preview", &Value::Null, opts)?;
    if opts.images == 0 || opts.scale == 0 {
        return Err(CliError::Config("images and scale must be positive".into()));
    }
    let kinds = if opts.kinds.is_empty() {
        CorruptionKind::ALL.to_vec()
    } else {
        opts.kinds.clone()
    };
    let source = bench::gen_shapeset(opts.images.div_ceil(bench::SHAPESET_CLASSES.len()), opts.seed);
    // classes are interleaved, so a prefix covers them evenly
    let picks: Vec<usize> = (0..opts.images).collect();
    let cell = bench::SHAPESET_SIZE * opts.scale;
    let (cols, rows) = (6, picks.len() * kinds.len());
    let (w, h) = (cols * (cell + GAP) + GAP, rows * (cell + GAP) + GAP);
    let mut pixels = vec![255u8; w * h];
    let mut row = 0;
    for &i in &picks {
        let clean = &source.images[i];
        for &kind in &kinds {
            for col in 0..cols {
                let im = if col == 0 {
                    clean.clone()
                } else {
                    let spec = CorruptionSpec::new(kind, col as u8)?;
                    let mut r = rng::seeded(rng::derive_seed(opts.seed, source.ids[i]));
                    bench::corrupt(clean, spec, &mut r)?
                };
                let (x0, y0) = (GAP + col * (cell + GAP), GAP + row * (cell + GAP));
                let side = bench::SHAPESET_SIZE;
                for y in 0..cell {
                    for x in 0..cell {
                        let v = im.data()[(y / opts.scale) * side + x / opts.scale];
                        pixels[(y0 + y) * w + x0 + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
            row += 1;
        }
    }
    let mut comments = prov.comment_lines();
    comments.push(format!(
        "rows: images x [{}]; columns: clean, severity 1..5",
        kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
    ));
    let path = out.join("corrupt_preview.pgm");
    std::fs::create_dir_all(out)?;
    std::fs::write(&path, plot::pgm(w, h, &pixels, &comments))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_grids() {
        let g: AlphaGrid = "0.1:0.5:0.1".parse().unwrap();
        assert_eq!(g.0.len(), 5);
        assert!((g.0[4] - 0.5).abs() < 1e-12);
        assert_eq!("0.2,0.4".parse::<AlphaGrid>().unwrap().0, vec![0.2, 0.4]);
        for bad in ["", "0.1:0.5", "0.5:0.1:0.1", "0:0.5:0.1", "a,b", "0.1,1.5", "0.1:0.2:0"] {
            assert!(bad.parse::<AlphaGrid>().is_err(), "{bad}");
        }
    }

    #[test]
    fn default_theory_grid_is_the_library_grid() {
        let g: AlphaGrid = "0.01:0.5:0.01".parse().unwrap();
        assert_eq!(g.0, theory::default_alpha_grid());
    }
}
