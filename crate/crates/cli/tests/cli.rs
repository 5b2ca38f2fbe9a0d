mod common;

use std::path::Path;

use common::*;
use tttlab::regimes::METRICS_HEADER;
use tttlab_cli::provenance::strip_preamble;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrained(dir: &Path) -> std::path::PathBuf {
    let cfg = write_config(dir, &tiny_config());
    let o = tttlab(&["pretrain", "--config", s(&cfg), "--out", s(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    cfg
}

#[test]
fn missing_field_is_named_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = tiny_config();
    t["model"].as_table_mut().unwrap().remove("heads");
    let cfg = write_config(dir.path(), &t);
    let o = tttlab(&["pretrain", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("heads"), "{}", stderr(&o));
}

#[test]
fn pretraining_twice_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pretrained(a.path());
    pretrained(b.path());
    for f in ["mae.tttl", "pretrain_metrics.csv", "pretrain.json"] {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert_eq!(x, y, "{f}");
    }
    let csv = std::fs::read_to_string(a.path().join("pretrain_metrics.csv")).unwrap();
    assert!(csv.starts_with("# tttlab "));
    assert_eq!(strip_preamble(&csv).lines().next(), Some(METRICS_HEADER));
    let j = json(&a.path().join("pretrain.json"));
    assert_eq!(j["provenance"]["config"]["seed"], 1);
    assert_eq!(j["provenance"]["config"]["model"]["encoder_dim"], 16);
}

#[test]
fn every_regime_runs_from_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pretrained(dir.path());
    for regime in ["probe", "finetune", "joint"] {
        let o = tttlab(&["train-head", "--config", s(&cfg), "--out", s(dir.path()), "--regime", regime]);
        assert!(o.status.success(), "{regime}: {}", stderr(&o));
    }
    let probe = json(&dir.path().join("head-probe.json"));
    assert_eq!(probe["result"]["encoder_digest_before"], probe["result"]["encoder_digest_after"]);
    let ft = json(&dir.path().join("head-fine-tune.json"));
    assert_ne!(ft["result"]["encoder_digest_before"], ft["result"]["encoder_digest_after"]);
    assert!(dir.path().join("mae-joint.tttl").exists());
    let joint = std::fs::read_to_string(dir.path().join("head-joint_metrics.csv")).unwrap();
    let row = strip_preamble(&joint).lines().nth(1).unwrap().to_string();
    let cells: Vec<&str> = row.split(',').collect();
    assert!(!cells[2].is_empty() && !cells[3].is_empty(), "{row}");

    let o = tttlab(&["train-head", "--config", s(&cfg), "--out", s(dir.path()), "--regime", "jiont"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ttt_eval_outputs_and_reductions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pretrained(dir.path());
    let o = tttlab(&["train-head", "--config", s(&cfg), "--out", s(dir.path()), "--regime", "probe"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = tttlab(&[
        "ttt-eval", "--config", s(&cfg), "--out", s(dir.path()), "--steps", "0",
        "--corruption", "gaussian-noise:3", "--corruption", "contrast:2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = json(&dir.path().join("ttt_summary.json"));
    let entries = summary["result"]["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["corruption"], "gaussian-noise:3");
    assert_eq!(entries[0]["accuracy"].as_array().unwrap().len(), 1);
    assert_eq!(entries[0]["baseline_accuracy"], entries[0]["final_accuracy"]);
    let svg = std::fs::read_to_string(dir.path().join("ttt_accuracy.svg")).unwrap();
    assert!(svg.contains("<!-- tttlab"));
    assert_eq!(svg.matches("<polyline points=").count(), 3);

    let o = tttlab(&[
        "ttt-eval", "--config", s(&cfg), "--out", s(dir.path()), "--corruption", "pixelate:3",
        "--ssl", "mae", "--ssl", "rotation",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("ttt_comparison.csv")).unwrap();
    let rows: Vec<String> = strip_preamble(&table).lines().map(String::from).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("pixelate:3,config,mae,8,"));
    assert!(rows[2].starts_with("pixelate:3,config,rotation,8,"));
    assert!(dir.path().join("ttt_trace_rotation_config_pixelate-3.csv").exists());

    let o = tttlab(&["ttt-eval", "--config", s(&cfg), "--out", s(dir.path()), "--optimizer", "adam"]);
    assert_eq!(o.status.code(), Some(2));
    let o = tttlab(&["ttt-eval", "--config", s(&cfg), "--out", s(dir.path()), "--regime", "joint"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn theory_defaults_pass_and_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let t = std::time::Instant::now();
    for d in [&a, &b] {
        let o = tttlab(&["theory", "--out", s(d.path())]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert!(t.elapsed().as_secs() < 60);
    for f in ["theory_risk.csv", "theory.json", "theory_risk.svg"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let j = json(&a.path().join("theory.json"));
    assert_eq!(j["result"]["theorem"]["pass"], true);
    assert!(j["result"]["alignment"]["closed_form"].is_number());
    let csv = std::fs::read_to_string(a.path().join("theory_risk.csv")).unwrap();
    let body = strip_preamble(&csv);
    assert_eq!(body.lines().next(), Some("alpha,risk,se"));
    assert_eq!(body.lines().count(), 52);
}

#[test]
fn theory_flags_r11_one_and_rejects_bad_grids() {
    let dir = tempfile::tempdir().unwrap();
    let o = tttlab(&["theory", "--r11", "1.0", "--samples", "2000", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let j = json(&dir.path().join("theory.json"));
    assert_eq!(j["result"]["theorem"]["pass"], false);
    assert!(j["result"]["theorem"]["note"].as_str().unwrap().contains("assumption violated"));
    for bad in ["0.1:0.5", "x", "0.2,2"] {
        let o = tttlab(&["theory", "--alphas", bad, "--out", s(dir.path())]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
    }
    let o = tttlab(&["theory", "--sigma1", "0.5", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_tttlab"))
        .args(["theory", "--samples", "100"])
        .env("TTTLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_preview_writes_a_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let o = tttlab(&["corrupt-preview", "--images", "2", "--kind", "contrast", "--scale", "1", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(dir.path().join("corrupt_preview.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n# tttlab "));
    // 6 columns and 2 rows of 32-pixel cells with 2-pixel gaps
    let (w, h) = (6 * 34 + 2, 2 * 34 + 2);
    let header = format!("{w} {h}\n255\n");
    let at = bytes.windows(header.len()).position(|x| x == header.as_bytes()).unwrap();
    assert_eq!(bytes.len() - at - header.len(), w * h);
    let o = tttlab(&["corrupt-preview", "--kind", "fog", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}
