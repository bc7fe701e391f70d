use std::path::{Path, PathBuf};
use std::sync::Arc;

use attgate::core::data::{Split, CHANNELS, FRAMES_PER_DAY};
use attgate::core::synth::SynthParams;
use attgate::core::training::MetricsRecord;
use attgate::core::{FeatureFlags, TrafficMovie};
use attgate::dataset::{write_manifest, Dataset, Loader, ManifestEntry};
use attgate::generate::{generate, GenOptions};
use attgate::trainer::{evaluate_persistence, TrainOptions, Trainer, LATEST_CHECKPOINT, METRICS_FILE};
use attgate::{Checkpoint, ConfigLayer, Error, RunConfig, Tmov};
use chrono::NaiveDate;

fn city(dir: &Path, name: &str, seed: u64, days: usize, val_days: usize) -> (PathBuf, Option<PathBuf>) {
    let opts = GenOptions { seed, height: 16, width: 12, days, val_days, city: name.into(), ..GenOptions::default() };
    let g = generate(&dir.join(name), &opts).unwrap();
    (g.manifest, g.val_manifest)
}

fn tiny(steps: u64, eval_at: &[u64]) -> RunConfig {
    let layer = ConfigLayer::from_toml(&format!(
        "[model]\ndepth = 2\nbase_channels = 4\ngrowth = 2\n[train]\nsteps = {steps}\neval_at = {eval_at:?}\n"
    ))
    .unwrap();
    RunConfig::resolve([&layer]).unwrap()
}

fn open(manifest: &Path, split: Split) -> Arc<Dataset> {
    Arc::new(Dataset::open(&[manifest.to_path_buf()], split, 0, false).unwrap())
}

#[test]
fn evaluation_schedule_and_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = city(dir.path(), "a", 1, 1, 1);
    let out = dir.path().join("run");
    let mut t = Trainer::new(tiny(6, &[2, 4, 6])).unwrap();
    let opts = TrainOptions { out_dir: Some(out.clone()), ..TrainOptions::default() };
    let records = t.run(open(&train, Split::Train), Some(open(&val.unwrap(), Split::Validation)), &opts).unwrap();
    let val_steps: Vec<u64> = records.iter().filter(|r| r.split == Split::Validation).map(|r| r.step).collect();
    assert_eq!(val_steps, vec![2, 4, 6]);
    let csv = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], MetricsRecord::CSV_HEADER);
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1..].iter().all(|l| l.ends_with(",0.000")));
    for r in &records {
        let mean = r.mse_horizons.iter().sum::<f64>() / 6.0;
        assert!((r.mse - mean).abs() <= 1e-7);
    }
    assert!(out.join(LATEST_CHECKPOINT).exists());
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = city(dir.path(), "a", 2, 1, 1);
    let val = val.unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut t = Trainer::new(tiny(4, &[2, 4])).unwrap();
        let opts = TrainOptions { out_dir: Some(out.clone()), workers: 2, ..TrainOptions::default() };
        t.run(open(&train, Split::Train), Some(open(&val, Split::Validation)), &opts).unwrap();
        (std::fs::read(out.join(METRICS_FILE)).unwrap(), std::fs::read(out.join(LATEST_CHECKPOINT)).unwrap())
    };
    assert_eq!(run("x"), run("y"));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = city(dir.path(), "a", 3, 1, 0);
    let data = open(&train, Split::Train);
    let mut straight = Trainer::new(tiny(6, &[3, 6])).unwrap();
    straight.run(Arc::clone(&data), None, &TrainOptions::default()).unwrap();

    let out = dir.path().join("first");
    let mut first = Trainer::new(tiny(3, &[3])).unwrap();
    first.run(Arc::clone(&data), None, &TrainOptions { out_dir: Some(out.clone()), ..TrainOptions::default() }).unwrap();
    let ckpt = Checkpoint::load(&out.join(LATEST_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.step, 3);
    let mut resumed = Trainer::resume(tiny(6, &[3, 6]), &ckpt).unwrap();
    resumed.run(data, None, &TrainOptions::default()).unwrap();
    assert_eq!(resumed.step, 6);
    assert_eq!(&straight.losses[3..], &resumed.losses[..]);
    for ((_, a), (_, b)) in straight.model.named_parameters().iter().zip(resumed.model.named_parameters()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn resume_rejects_other_features() {
    let t = Trainer::new(tiny(4, &[4])).unwrap();
    let ckpt = t.checkpoint();
    let mut other = tiny(4, &[4]);
    other.train.flags.time = false;
    other.sync_channels();
    assert!(matches!(Trainer::resume(other, &ckpt), Err(Error::Config(_))));
}

#[test]
fn zero_head_loss_is_mean_square_target() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = city(dir.path(), "a", 4, 1, 0);
    let data = open(&train, Split::Train);
    let mut t = Trainer::new(tiny(1, &[1])).unwrap();
    let head = &mut t.model.params_mut().head;
    head.weight.data_mut().fill(0.0);
    head.bias.data_mut().fill(0.0);
    let flags = t.cfg.train.flags;
    let batch: Vec<_> = data.index.entries()[..2].iter().map(|&e| data.prepare(e, &flags).unwrap()).collect();
    let expect = batch.iter().map(|p| p.target.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / p.target.numel() as f64).sum::<f64>() / 2.0;
    let loss = t.train_step(&batch, None).unwrap();
    assert!((loss - expect).abs() <= 1e-6 * expect, "{loss} vs {expect}");
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = city(dir.path(), "a", 5, 1, 0);
    let data = open(&train, Split::Train);
    let mut t = Trainer::new(tiny(5, &[5])).unwrap();
    t.model.params_mut().head.bias.data_mut()[0] = f32::NAN;
    match t.run(data, None, &TrainOptions::default()) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a numeric abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn persistence_on_static_movie_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("still.tmov");
    let m = TrafficMovie::new("s", NaiveDate::from_ymd_opt(2019, 4, 1).unwrap(), 5, 4, vec![93; FRAMES_PER_DAY * 5 * 4 * CHANNELS]).unwrap();
    attgate::write_tmov(&path, &Tmov::from_movie(&m)).unwrap();
    let data = Dataset::from_entries(&[ManifestEntry { path, city: None }], Split::Validation, 0, false).unwrap();
    let acc = evaluate_persistence(&data, &FeatureFlags::dynamic_only()).unwrap();
    assert_eq!(acc.mse(), 0.0);
}

#[test]
fn persistence_error_grows_with_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let opts = GenOptions { seed: 6, height: 24, width: 20, days: 3, params: SynthParams::default(), ..GenOptions::default() };
    let g = generate(dir.path(), &opts).unwrap();
    let data = open(&g.manifest, Split::Validation);
    let h = evaluate_persistence(&data, &FeatureFlags::default()).unwrap().horizons();
    assert!(h.windows(2).all(|w| w[0] <= w[1]), "{h:?}");
}

#[test]
fn empty_or_missing_inputs_fail_with_identity() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    write_manifest(&empty, &[]).unwrap();
    assert!(matches!(Dataset::open(&[empty], Split::Validation, 0, false), Err(Error::Config(_))));
    let missing = dir.path().join("gone.tmov");
    let listing = dir.path().join("m.txt");
    write_manifest(&listing, &[ManifestEntry { path: missing.clone(), city: None }]).unwrap();
    match Dataset::open(&[listing], Split::Train, 0, false) {
        Err(Error::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("expected an I/O error, got {other:?}"),
    }
}

#[test]
fn static_features_need_a_static_map() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = city(dir.path(), "a", 7, 1, 0);
    let entries: Vec<ManifestEntry> = attgate::dataset::read_manifest(&train).unwrap().into_iter().filter(|e| !e.path.to_string_lossy().contains("static")).collect();
    let data = Dataset::from_entries(&entries, Split::Train, 0, false).unwrap();
    assert!(matches!(data.check_flags(&FeatureFlags::default()), Err(Error::Config(_))));
    assert!(data.check_flags(&FeatureFlags::dynamic_only()).is_ok());
}

#[test]
fn multi_city_index_alternates() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = city(dir.path(), "north", 8, 1, 0);
    let (b, _) = city(dir.path(), "south", 9, 1, 0);
    let data = Dataset::open(&[a, b], Split::Train, 3, true).unwrap();
    let cities: Vec<&str> = data.index.entries().iter().map(|e| data.movies[e.source].city.as_str()).collect();
    assert_eq!(cities.len(), 2 * 265);
    assert!(cities.windows(2).all(|w| w[0] != w[1]));
}

#[test]
fn loader_preserves_order() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = city(dir.path(), "a", 10, 2, 0);
    let data = open(&train, Split::Train);
    let flags = FeatureFlags::default();
    let entries: Vec<_> = data.index.entries()[..12].to_vec();
    let mut loader = Loader::new(Arc::clone(&data), flags, 3);
    for &e in &entries {
        loader.submit(e);
    }
    for &e in &entries {
        let got = loader.recv().unwrap();
        let want = data.prepare(e, &flags).unwrap();
        assert_eq!(got.entry, e);
        assert_eq!(got.input.data(), want.input.data());
        assert_eq!(got.target.data(), want.target.data());
    }
}
