use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lvfm_core::model::ModelConfig;
use lvfm_core::pipeline::{Checkpoint, RunConfig};
use serde_json::Value;

fn lvfm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_lvfm"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("run lvfm");
    assert!(
        out.status.success(),
        "lvfm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A config small enough to train in well under a second per epoch.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.model = ModelConfig {
        channels: vec![4, 8],
        frames: 4,
        embed_dim: 8,
        ..ModelConfig::default()
    };
    cfg.data.n_videos = 6;
    cfg.data.f_max = 4;
    cfg.train.epochs = 2;
    cfg.eval.n_items = 3;
    cfg.eval.bench_iters = 2;
    let path = dir.join("tiny.toml");
    cfg.save(&path).unwrap();
    path
}

struct Trained {
    dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
}

fn trained() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    lvfm(&["datagen", "--config", s(&config), "--out", s(&data)]);
    lvfm(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    Trained {
        checkpoint: run.join("checkpoint.bin"),
        dir,
        config,
        data,
    }
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn datagen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    lvfm(&["datagen", "--config", s(&config), "--out", s(&a)]);
    lvfm(&["datagen", "--config", s(&config), "--out", s(&b)]);
    let (fa, fb) = (dir_contents(&a), dir_contents(&b));
    assert_eq!(fa.len(), 7, "six videos plus the manifest");
    assert!(fa == fb);

    let c = dir.path().join("c");
    lvfm(&["datagen", "--config", s(&config), "--seed", "6", "--out", s(&c)]);
    assert!(dir_contents(&c) != fa);
}

#[test]
fn one_step_sample_writes_valid_frames_only() {
    let t = trained();
    let out = t.dir.path().join("sample");
    let res = lvfm(&[
        "sample", "--checkpoint", s(&t.checkpoint), "--ef", "0.4", "--frames", "3", "--scale", "2", "--out", s(&out),
    ]);
    let log = String::from_utf8_lossy(&res.stderr);
    assert!(log.contains("model invocations: 1\n") || log.ends_with("model invocations: 1"), "{log}");

    let names: Vec<String> = dir_contents(&out).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["frame_00.png", "frame_01.png", "frame_02.png", "mmode.png", "video.gif"]);
    let frame = image::open(out.join("frame_00.png")).unwrap();
    assert_eq!((frame.width(), frame.height()), (32, 32));

    let again = t.dir.path().join("again");
    lvfm(&[
        "sample", "--checkpoint", s(&t.checkpoint), "--ef", "0.4", "--frames", "3", "--scale", "2", "--out", s(&again),
    ]);
    assert!(dir_contents(&out) == dir_contents(&again));
}

#[test]
fn multi_step_sample_counts_invocations() {
    let t = trained();
    let out = t.dir.path().join("sample");
    let res = lvfm(&["sample", "--checkpoint", s(&t.checkpoint), "--steps", "5", "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("model invocations: 5"));
}

#[test]
fn eval_writes_reports_with_rejection_sampling() {
    let t = trained();
    let out = t.dir.path().join("eval");
    lvfm(&[
        "eval", "--checkpoint", s(&t.checkpoint), "--data", s(&t.data), "--task", "gen", "--rs", "3", "--out", s(&out),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics_gen.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["rejection_k"], 3);
    assert_eq!(report["summary"]["task"], "gen");
    let n = report["summary"]["n_records"].as_u64().unwrap() + report["summary"]["n_failed"].as_u64().unwrap();
    assert_eq!(n, 3);
    let csv = fs::read_to_string(out.join("metrics_gen.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64, 1 + report["summary"]["n_records"].as_u64().unwrap());

    let rec = t.dir.path().join("rec");
    lvfm(&["eval", "--checkpoint", s(&t.checkpoint), "--data", s(&t.data), "--task", "rec", "--out", s(&rec)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(rec.join("metrics_rec.json")).unwrap()).unwrap();
    assert!(report["summary"]["quality"]["ssim"].is_number());
}

#[test]
fn bench_reports_one_and_twenty_five_steps() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("bench");
    lvfm(&["bench", "--config", s(&config), "--out", s(&out)]);
    let table: Value = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    let steps: Vec<u64> = rows.iter().map(|r| r["steps"].as_u64().unwrap()).collect();
    let evals: Vec<u64> = rows.iter().map(|r| r["evaluations"].as_u64().unwrap()).collect();
    assert_eq!(steps, [1, 25, 25]);
    assert_eq!(evals, [1, 25, 50]);
    assert!(table["speedup_1_vs_25"].as_f64().unwrap() > 1.0);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let data = dir.path().join("data");
    lvfm(&["datagen", "--config", s(&config), "--out", s(&data)]);
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    lvfm(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&full)]);
    lvfm(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&split), "--until", "1"]);
    let ck = split.join("checkpoint.bin");
    assert_eq!(Checkpoint::load(&ck).unwrap().state.epoch, 1);
    lvfm(&["train", "--data", s(&data), "--resume", s(&ck), "--out", s(&split)]);
    let a = Checkpoint::load(&full.join("checkpoint.bin")).unwrap();
    let b = Checkpoint::load(&ck).unwrap();
    assert_eq!(b.state.epoch, 2);
    assert_eq!(a.state.params, b.state.params);
    let log = fs::read_to_string(split.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn mismatched_config_is_rejected() {
    let t = trained();
    let mut other = RunConfig::load(&t.config).unwrap();
    other.model.embed_dim = 16;
    let path = t.dir.path().join("other.toml");
    other.save(&path).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lvfm"))
        .args(["sample", "--checkpoint", s(&t.checkpoint), "--config", s(&path)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config mismatch"));
}
