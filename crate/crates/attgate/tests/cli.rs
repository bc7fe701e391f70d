use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attgate::checkpoint::Checkpoint;
use attgate::cli::RunManifest;
use attgate::core::{ChannelLayout, FeatureFlags, ModelConfig, UNetModel};
use attgate::tmov::read_header;
use attgate::{read_tmov, Role};

fn attgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attgate")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = attgate(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    attgate(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 16x12 city with one training and one validation day.
fn small_city(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let out = dir.join(name);
    ok(&["gen", "--seed", &seed.to_string(), "--height", "16", "--width", "12", "--days", "1", "--val-days", "1", "--city", name, "--out", s(&out)]);
    out
}

const TINY: [&str; 6] = ["--depth", "2", "--base-channels", "4", "--growth", "2"];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let (m, v) = (data.join("manifest.txt"), data.join("val_manifest.txt"));
    let mut args = vec!["train", "--manifest", s(&m), "--val-manifest", s(&v), "--out", s(out)];
    args.extend(TINY);
    args.extend(extra);
    attgate(&args)
}

#[test]
fn gen_writes_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["gen", "--days", "7", "--height", "64", "--width", "56", "--seed", "3", "--out", s(&out)]);
        out
    };
    let a = run("a");
    let mut names: Vec<String> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".tmov")).count(), 8);
    assert_eq!(names.iter().filter(|n| n.starts_with("manifest")).count(), 1);
    assert!(names.contains(&"run.toml".to_string()));
    let movies: Vec<&String> = names.iter().filter(|n| n.ends_with(".tmov") && !n.contains("static")).collect();
    assert_eq!(movies.len(), 7);
    let h = read_header(&a.join(movies[0])).unwrap();
    assert_eq!((h.role, h.dims.clone()), (Role::Movie, vec![288, 64, 56, 9]));

    let b = run("b");
    for n in names.iter().filter(|n| n.ends_with(".tmov") || n.ends_with(".txt")) {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn train_writes_metrics_and_replays_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_city(dir.path(), "c", 1);
    let out = dir.path().join("run");
    assert!(train(&data, &out, &["--steps", "10"]).status.success());
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,split,mse,mse_h1,mse_h2,mse_h3,mse_h4,mse_h5,mse_h6,seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("10,train,") && lines[2].starts_with("10,val,"));

    let again = dir.path().join("again");
    ok(&["--from-manifest", s(&out.join("run.toml")), "--out", s(&again)]);
    for f in ["metrics.csv", "latest.ckpt", "best.ckpt", "layout.txt"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_city(dir.path(), "c", 2);
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[model]\ndepth = 3\nnorm_groups = 2\n[train]\nsteps = 4\nlearning_rate = 1e-3\n[features]\ntime = false\n").unwrap();
    let out = dir.path().join("run");
    assert!(train(&data, &out, &["--config", s(&cfg), "--steps", "3"]).status.success());
    let m = RunManifest::load(&out.join("run.toml")).unwrap();
    let c = m.config.unwrap();
    assert_eq!(c.model.depth, Some(2));
    assert_eq!(c.model.norm_groups, Some(2));
    assert_eq!(c.train.steps, Some(3));
    assert_eq!(c.train.learning_rate, Some(1e-3));
    assert_eq!(c.features.time, Some(false));
    assert!(std::fs::read_to_string(out.join("layout.txt")).unwrap().lines().all(|l| !l.contains("time.")));
}

#[test]
fn exit_codes_separate_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_city(dir.path(), "c", 3);
    let out = dir.path().join("run");
    assert_eq!(train(&data, &out, &["--batch-size", "0"]).status.code(), Some(2));
    assert_eq!(train(&data, &out, &["--bogus"]).status.code(), Some(2));
    assert_eq!(code(&["train", "--manifest", s(&dir.path().join("nope.txt")), "--out", s(&out)]), 3);
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[model]\ndepht = 2\n").unwrap();
    assert_eq!(train(&data, &out, &["--config", s(&bad_cfg)]).status.code(), Some(2));
    assert_eq!(train(&data, &out, &["--lr", "1e30", "--steps", "3"]).status.code(), Some(4));
}

#[test]
fn resume_continues_and_checks_features() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_city(dir.path(), "c", 4);
    let first = dir.path().join("first");
    assert!(train(&data, &first, &["--steps", "4"]).status.success());
    let ckpt = first.join("latest.ckpt");
    let mismatch = train(&data, &dir.path().join("bad"), &["--steps", "8", "--no-weekday", "--resume", s(&ckpt)]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(!dir.path().join("bad").join("metrics.csv").exists());
    let second = dir.path().join("second");
    assert!(train(&data, &second, &["--steps", "8", "--resume", s(&ckpt)]).status.success());
    assert_eq!(Checkpoint::load(&second.join("latest.ckpt")).unwrap().step, 8);
}

#[test]
fn multi_city_training_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_city(dir.path(), "east", 5);
    let b = small_city(dir.path(), "west", 6);
    let out = dir.path().join("run");
    let mut args = vec!["train", "--multi-city", "--steps", "4", "--out", s(&out)];
    let (ma, mb) = (a.join("manifest.txt"), b.join("manifest.txt"));
    args.extend(["--manifest", s(&ma), "--manifest", s(&mb)]);
    args.extend(TINY);
    ok(&args);
}

#[test]
fn eval_prints_model_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_city(dir.path(), "c", 7);
    let run = dir.path().join("run");
    assert!(train(&data, &run, &["--steps", "2"]).status.success());
    let val = data.join("val_manifest.txt");
    let ckpt = run.join("latest.ckpt");
    let ev = dir.path().join("ev");
    let plain = ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&val), "--out", s(&ev)]);
    assert_eq!(std::fs::read_to_string(ev.join("eval.csv")).unwrap().lines().count(), 2);
    let with_base = ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&val), "--baseline", "--scaled", "--out", s(&ev)]);
    assert_eq!(with_base.lines().count(), plain.lines().count() + 1);
    assert!(with_base.contains("persistence") && with_base.contains("raw"));
    let csv = std::fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("2,persistence,"));

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "# nothing\n").unwrap();
    assert_ne!(code(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&empty), "--out", s(&ev)]), 0);
}

#[test]
fn predict_writes_frames_and_attention() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_city(dir.path(), "c", 8);
    let run = dir.path().join("run");
    assert!(train(&data, &run, &["--steps", "2"]).status.success());
    let movie = data.join("c_2019-01-01.tmov");
    let stat = data.join("c_static.tmov");
    let out = dir.path().join("pred");
    let ckpt = run.join("latest.ckpt");
    ok(&["predict", "--checkpoint", s(&ckpt), "--movie", s(&movie), "--static", s(&stat), "--anchor", "100", "--out", s(&out)]);
    let p = read_tmov(&out.join("prediction.tmov")).unwrap();
    assert_eq!((p.header.role, p.header.dims.clone(), p.header.anchor), (Role::Prediction, vec![6, 16, 12, 9], Some(100)));
    let a0 = read_tmov(&out.join("attention_0.tmov")).unwrap();
    assert_eq!((a0.header.role, a0.header.dims.clone()), (Role::Attention, vec![16, 12, 1]));
    assert_eq!(read_tmov(&out.join("attention_1.tmov")).unwrap().header.dims, vec![8, 6, 1]);
    assert!(!out.join("attention_2.tmov").exists());

    assert_eq!(code(&["predict", "--checkpoint", s(&ckpt), "--movie", s(&movie), "--static", s(&stat), "--anchor", "276", "--out", s(&out)]), 2);
    assert_eq!(code(&["predict", "--checkpoint", s(&ckpt), "--movie", s(&movie), "--anchor", "100", "--out", s(&out)]), 2);
}

#[test]
fn zero_psi_model_exports_half_maps() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_city(dir.path(), "c", 9);
    let flags = FeatureFlags::default();
    let cfg = ModelConfig { depth: 2, base_channels: 4, growth: 2, in_channels: flags.input_channels(), out_channels: flags.output_channels(), ..ModelConfig::default() };
    let mut model = UNetModel::new(cfg, 1).unwrap();
    for g in &mut model.params_mut().gates {
        g.psi.weight.data_mut().fill(0.0);
        g.psi.bias.data_mut().fill(0.0);
    }
    let ckpt = dir.path().join("zero.ckpt");
    Checkpoint::capture(&model, &ChannelLayout::new(flags).unwrap(), "", 0, None, None).save(&ckpt).unwrap();
    let out = dir.path().join("pred");
    let (movie, stat) = (data.join("c_2019-01-01.tmov"), data.join("c_static.tmov"));
    ok(&["predict", "--checkpoint", s(&ckpt), "--movie", s(&movie), "--static", s(&stat), "--anchor", "11", "--out", s(&out)]);
    for i in 0..2 {
        let a = read_tmov(&out.join(format!("attention_{i}.tmov"))).unwrap();
        assert!(a.payload.iter().all(|&b| b == 128));
    }
}
