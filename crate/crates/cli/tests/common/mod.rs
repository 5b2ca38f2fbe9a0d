#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tttlab_cli::config::EXAMPLE;

/// The example config shrunk to a model and data set that train in
/// about a second.
pub fn tiny_config() -> toml::Table {
    let mut t: toml::Table = EXAMPLE.parse().unwrap();
    let set = |t: &mut toml::Table, path: &[&str], v: toml::Value| {
        let (last, head) = path.split_last().unwrap();
        let mut cur = t;
        for k in head {
            cur = cur.get_mut(*k).unwrap().as_table_mut().unwrap();
        }
        assert!(cur.contains_key(*last), "{path:?}");
        cur.insert(last.to_string(), v);
    };
    let int = toml::Value::Integer;
    set(&mut t, &["data", "train_per_class"], int(3));
    set(&mut t, &["data", "test_per_class"], int(1));
    for (k, v) in [("encoder_dim", 16), ("encoder_depth", 1), ("decoder_dim", 8), ("decoder_depth", 1), ("heads", 2), ("mlp_ratio", 2)] {
        set(&mut t, &["model", k], int(v));
    }
    for s in ["pretrain", "head"] {
        set(&mut t, &[s, "epochs"], int(1));
        set(&mut t, &[s, "batch_size"], int(8));
        set(&mut t, &[s, "warmup_epochs"], int(0));
    }
    set(&mut t, &["ttt", "steps"], int(2));
    set(&mut t, &["ttt", "masked_copies"], int(2));
    t
}

pub fn write_config(dir: &Path, t: &toml::Table) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, toml::to_string(t).unwrap()).unwrap();
    p
}

pub fn tttlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tttlab"))
        .args(args)
        .env("TTTLAB_THREADS", "2")
        .output()
        .unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
