use tttlab::bench::gen_shapeset;
use tttlab::data::Dataset;
use tttlab::head::{HeadKind, HeadModel};
use tttlab::regimes::*;
use tttlab::{MaeConfig, MaeModel};

fn small_config() -> MaeConfig {
    MaeConfig {
        encoder_dim: 16,
        encoder_depth: 1,
        decoder_dim: 8,
        decoder_depth: 1,
        heads: 2,
        mlp_ratio: 2,
        ..MaeConfig::default()
    }
}

fn setup() -> (MaeModel<f32>, Dataset<f32>) {
    (MaeModel::new(small_config(), 3).unwrap(), gen_shapeset(2, 11))
}

fn regime(regime: Regime, head: HeadKind) -> RegimeConfig {
    RegimeConfig {
        regime,
        head,
        epochs: 1,
        batch_size: 8,
        ..RegimeConfig::default()
    }
}

fn encoder_hash(m: &MaeModel<f32>) -> String {
    m.params.digest_prefix("encoder.") + &m.params.digest_prefix("cls_token")
}

fn decoder_hash(m: &MaeModel<f32>) -> String {
    m.params.digest_prefix("decoder.") + &m.params.digest_prefix("mask_token")
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let (mut m, data) = setup();
    let before = m.params.digest();
    let cfg = PretrainConfig {
        epochs: 0,
        ..PretrainConfig::default()
    };
    let r = pretrain_mae(&mut m, &data, &cfg, 1).unwrap();
    assert_eq!(m.params.digest(), before);
    assert_eq!(r.steps, 0);
}

#[test]
fn pretraining_is_deterministic_and_reports_metrics() {
    let (m0, data) = setup();
    let cfg = PretrainConfig {
        epochs: 2,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    let (mut a, mut b) = (m0.clone(), m0);
    let ra = pretrain_mae(&mut a, &data, &cfg, 5).unwrap();
    let rb = pretrain_mae(&mut b, &data, &cfg, 5).unwrap();
    assert_eq!(a.params.digest(), b.params.digest());
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(ra.metrics.len(), 3);
    assert_eq!(ra.steps, 4);
    let mut csv = Vec::new();
    ra.write_metrics_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    assert_eq!(text.lines().count(), 4);
    ra.audit().unwrap();
}

#[test]
fn probe_freezes_encoder_and_decoder() {
    let (m, data) = setup();
    let mut h = HeadModel::new(HeadKind::LinearProbe, 16, 8, 1).unwrap();
    let enc = encoder_hash(&m);
    let head_before = h.params.digest();
    let r = train_probe(&m, &mut h, &data, &regime(Regime::Probe, HeadKind::LinearProbe), 2).unwrap();
    assert_eq!(encoder_hash(&m), enc);
    assert_ne!(h.params.digest(), head_before);
    assert!(r.metrics[0].accuracy.is_some());
}

#[test]
fn finetune_moves_encoder_but_not_decoder() {
    let (mut m, data) = setup();
    let mut h = HeadModel::new(HeadKind::LinearProbe, 16, 8, 1).unwrap();
    let (enc, dec) = (encoder_hash(&m), decoder_hash(&m));
    train_finetune(&mut m, &mut h, &data, &regime(Regime::FineTune, HeadKind::LinearProbe), 2).unwrap();
    assert_ne!(encoder_hash(&m), enc);
    assert_eq!(decoder_hash(&m), dec);
}

#[test]
fn joint_logs_both_losses_and_moves_decoder() {
    let (mut m, data) = setup();
    let mut h = HeadModel::new(HeadKind::LinearProbe, 16, 8, 1).unwrap();
    let dec = decoder_hash(&m);
    let r = train_joint(&mut m, &mut h, &data, &regime(Regime::Joint, HeadKind::LinearProbe), 2).unwrap();
    assert_ne!(decoder_hash(&m), dec);
    assert!(r.metrics[0].loss_main.is_some() && r.metrics[0].loss_recon.is_some());
}

#[test]
fn joint_without_reconstruction_matches_finetune() {
    let (m0, data) = setup();
    let h0 = HeadModel::new(HeadKind::VitProbe, 16, 8, 1).unwrap();
    let (mut mf, mut hf) = (m0.clone(), h0.clone());
    train_finetune(&mut mf, &mut hf, &data, &regime(Regime::FineTune, HeadKind::VitProbe), 4).unwrap();
    let (mut mj, mut hj) = (m0, h0);
    train_joint_weighted(&mut mj, &mut hj, &data, &regime(Regime::Joint, HeadKind::VitProbe), 0.0, 4).unwrap();
    assert_eq!(encoder_hash(&mf), encoder_hash(&mj));
    assert_eq!(hf.params.digest(), hj.params.digest());
}

#[test]
fn regime_mismatch_is_rejected() {
    let (mut m, data) = setup();
    let mut h = HeadModel::new(HeadKind::LinearProbe, 16, 8, 1).unwrap();
    assert!(train_finetune(&mut m, &mut h, &data, &regime(Regime::Probe, HeadKind::LinearProbe), 0).is_err());
    let mut wrong = HeadModel::new(HeadKind::LinearProbe, 16, 5, 1).unwrap();
    assert!(train_head(&mut m, &mut wrong, &data, &regime(Regime::Probe, HeadKind::LinearProbe), 0).is_err());
}

#[test]
fn linear_probe_is_smaller_than_vit_probe() {
    let lin = HeadModel::<f32>::new(HeadKind::LinearProbe, 64, 8, 0).unwrap();
    let vit = HeadModel::<f32>::new(HeadKind::VitProbe, 64, 8, 0).unwrap();
    assert!(lin.param_count() < vit.param_count());
    assert_eq!(lin.param_count(), 64 * 8 + 8);
}

#[test]
fn training_transforms_exclude_corruptions() {
    let (mut m, data) = setup();
    let mut h = HeadModel::new(HeadKind::LinearProbe, 16, 8, 1).unwrap();
    let r = train_joint(&mut m, &mut h, &data, &regime(Regime::Joint, HeadKind::LinearProbe), 2).unwrap();
    r.audit().unwrap();
    assert!(r.transforms.iter().all(|t| t == "pad-crop" || t == "horizontal-flip"));

    let mut bad = r.clone();
    bad.transforms.insert("contrast".into());
    assert!(bad.audit().is_err());
}

#[test]
fn regime_names_parse_from_config() {
    #[derive(serde::Deserialize)]
    struct W {
        r: Regime,
    }
    for (s, want) in [("probe", Regime::Probe), ("fine-tune", Regime::FineTune), ("finetune", Regime::FineTune), ("joint", Regime::Joint)] {
        let w: W = serde_json::from_str(&format!("{{\"r\":\"{s}\"}}")).unwrap();
        assert_eq!(w.r, want);
    }
    assert!(serde_json::from_str::<W>("{\"r\":\"jont\"}").is_err());
}
