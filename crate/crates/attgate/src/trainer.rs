//! The training loop, evaluation and inference on top of the core crate.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use attgate_core::data::Split;
use attgate_core::training::{mse_loss, output_to_frames, persistence_baseline, unit_to_byte, MetricsRecord, MseAccumulator};
use attgate_core::{adam_step, assemble_input, AdamState, ChannelLayout, FeatureFlags, Sample, StaticMap, Tape, Tensor, UNetModel};

use crate::checkpoint::Checkpoint;
use crate::config::{ConfigLayer, RunConfig};
use crate::dataset::{Dataset, Loader, Prepared};
use crate::error::{Error, IoContext, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub workers: usize,
    /// Samples prepared ahead of the optimizer.
    pub prefetch: usize,
    /// Print one line per evaluation.
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { out_dir: None, workers: 1, prefetch: 4, verbose: false }
    }
}

/// Model, optimizer and progress of one run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub layout: ChannelLayout,
    pub model: UNetModel,
    pub adam: AdamState,
    pub step: u64,
    pub best_val: Option<f64>,
    /// Mean loss of every completed step, in order.
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = UNetModel::new(cfg.model.clone(), cfg.train.seed)?;
        let adam = AdamState::new(cfg.train.learning_rate, model.named_parameters().into_iter().map(|(_, t)| t));
        let layout = ChannelLayout::new(cfg.train.flags)?;
        Ok(Self { cfg, layout, model, adam, step: 0, best_val: None, losses: Vec::new() })
    }

    /// Continues from `ckpt`; the model and features must match `cfg` exactly.
    pub fn resume(cfg: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.model != cfg.model {
            return Err(Error::Config(format!("checkpoint model differs from the requested one:\n{}vs\n{}", ckpt.model.to_text(), cfg.model.to_text())));
        }
        if ckpt.layout.flags != cfg.train.flags {
            return Err(Error::Config(format!("checkpoint features {:?} differ from requested {:?}", ckpt.layout.flags, cfg.train.flags)));
        }
        if ckpt.step >= cfg.train.max_steps {
            return Err(Error::Config(format!("checkpoint is at step {} but the run ends at {}", ckpt.step, cfg.train.max_steps)));
        }
        let model = ckpt.to_model()?;
        let mut adam = ckpt.adam.clone().ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        adam.lr = cfg.train.learning_rate;
        Ok(Self { layout: ckpt.layout.clone(), cfg, model, adam, step: ckpt.step, best_val: ckpt.best_val, losses: Vec::new() })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let run = ConfigLayer::resolved(&self.cfg).to_toml();
        Checkpoint::capture(&self.model, &self.layout, &run, self.step, self.best_val, Some(&self.adam))
    }

    /// One optimizer update on `batch`, returning the batch-mean loss.
    pub fn train_step(&mut self, batch: &[Prepared], train_acc: Option<&mut MseAccumulator>) -> Result<f64> {
        let scale = 1.0 / batch.len() as f32;
        let mut loss = 0.0f64;
        let mut acc = train_acc;
        for p in batch {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(p.input.clone());
            let y = tape.constant(p.target.clone());
            let (bound, fv) = self.model.forward_tape(&mut tape, x)?;
            let l = mse_loss(&mut tape, fv.output, y)?;
            let value = tape.value(l).item()? as f64;
            if !value.is_finite() {
                self.model.zero_grad();
                return Err(Error::NonFinite { step: self.step + 1, loss: value });
            }
            loss += value / batch.len() as f64;
            if let Some(acc) = acc.as_deref_mut() {
                acc.add(tape.value(fv.output), &p.target)?;
            }
            let scaled = tape.scale(l, scale);
            tape.backward(scaled)?;
            self.model.accumulate_grads(&tape, &bound)?;
        }
        adam_step(&mut self.model.parameters_mut(), &mut self.adam)?;
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Trains until the configured step budget, evaluating and checkpointing
    /// at each evaluation step. Returns the records written.
    pub fn run(&mut self, train: Arc<Dataset>, val: Option<Arc<Dataset>>, opts: &TrainOptions) -> Result<Vec<MetricsRecord>> {
        let flags = self.cfg.train.flags;
        train.check_flags(&flags)?;
        if let Some(v) = &val {
            v.check_flags(&flags)?;
        }
        let mut csv = match &opts.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).at(dir)?;
                Some(MetricsWriter::open(&dir.join(METRICS_FILE), self.step > 0)?)
            }
            None => None,
        };
        let started = Instant::now();
        let seconds = |det: bool| if det { 0.0 } else { started.elapsed().as_secs_f64() };
        let batch_size = self.cfg.train.batch_size;
        let remaining = (self.cfg.train.max_steps - self.step) as usize * batch_size;
        let mut cursor = train.index.cursor();
        cursor.fast_forward(self.step * batch_size as u64);
        let mut loader = Loader::new(Arc::clone(&train), flags, opts.workers);
        let mut submitted = 0;
        while submitted < remaining.min(opts.prefetch.max(batch_size)) {
            loader.submit(cursor.next().unwrap());
            submitted += 1;
        }
        let mut records = Vec::new();
        let mut train_acc = MseAccumulator::default();
        while self.step < self.cfg.train.max_steps {
            let mut batch = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                batch.push(loader.recv()?);
                if submitted < remaining {
                    loader.submit(cursor.next().unwrap());
                    submitted += 1;
                }
            }
            self.train_step(&batch, Some(&mut train_acc))?;
            if !self.cfg.train.eval_at.contains(&self.step) {
                continue;
            }
            let det = self.cfg.train.deterministic;
            let mut step_records = vec![train_acc.record(self.step, Split::Train, seconds(det))];
            train_acc = MseAccumulator::default();
            let mut improved = false;
            if let Some(v) = &val {
                let acc = evaluate(&self.model, Arc::clone(v), &flags, opts.workers)?;
                let rec = acc.record(self.step, Split::Validation, seconds(det));
                if opts.verbose {
                    println!("step {:>6}  val mse {:.9}", rec.step, rec.mse);
                }
                improved = self.best_val.is_none_or(|b| rec.mse < b);
                if improved {
                    self.best_val = Some(rec.mse);
                }
                step_records.push(rec);
            }
            if let Some(w) = csv.as_mut() {
                for r in &step_records {
                    w.write(r)?;
                }
            }
            if let Some(dir) = &opts.out_dir {
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join(LATEST_CHECKPOINT))?;
                if improved || (val.is_none() && self.step == self.cfg.train.max_steps) {
                    ckpt.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
            records.extend(step_records);
        }
        if let Some(dir) = &opts.out_dir {
            if !self.cfg.train.eval_at.contains(&self.step) {
                self.checkpoint().save(&dir.join(LATEST_CHECKPOINT))?;
            }
        }
        Ok(records)
    }
}

/// Append-only CSV of metrics records.
struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = if append { OpenOptions::new().create(true).append(true).open(path) } else { File::create(path) }.at(path)?;
        let mut w = Self { out: BufWriter::new(file), path: path.to_path_buf() };
        if !(append && exists) {
            writeln!(w.out, "{}", MetricsRecord::CSV_HEADER).at(path)?;
        }
        Ok(w)
    }

    fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row()).at(&self.path)?;
        self.out.flush().at(&self.path)
    }
}

/// Model error over every entry of `data`, in `[0, 1]` scale.
pub fn evaluate(model: &UNetModel, data: Arc<Dataset>, flags: &FeatureFlags, workers: usize) -> Result<MseAccumulator> {
    check_model_flags(model, flags)?;
    data.check_flags(flags)?;
    let entries = data.index.entries().to_vec();
    if entries.is_empty() {
        return Err(Error::Config("evaluation index is empty".into()));
    }
    let mut loader = Loader::new(data, *flags, workers);
    for &e in &entries {
        loader.submit(e);
    }
    let mut acc = MseAccumulator::default();
    for _ in &entries {
        let p = loader.recv()?;
        acc.add(&model.forward(&p.input)?, &p.target)?;
    }
    Ok(acc)
}

/// Persistence baseline error over every entry of `data`.
pub fn evaluate_persistence(data: &Dataset, flags: &FeatureFlags) -> Result<MseAccumulator> {
    let mut acc = MseAccumulator::default();
    for &e in data.index.entries() {
        let s = data.load_sample(e)?;
        let target = attgate_core::assemble_target(&s, flags)?;
        acc.add(&persistence_baseline(&s, flags)?, &target)?;
    }
    if acc.is_empty() {
        return Err(Error::Config("evaluation index is empty".into()));
    }
    Ok(acc)
}

fn check_model_flags(model: &UNetModel, flags: &FeatureFlags) -> Result<()> {
    let c = model.config();
    if c.in_channels != flags.input_channels() || c.out_channels != flags.output_channels() {
        return Err(Error::Config(format!(
            "model takes {} inputs and gives {} outputs but the features need {} and {}",
            c.in_channels,
            c.out_channels,
            flags.input_channels(),
            flags.output_channels()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Six `(H, W, 9)` byte frames, horizon-major.
    pub frames: Vec<u8>,
    /// Gate coefficients per level, finest first, as `(h, w, 1)` bytes.
    pub attention: Vec<(usize, usize, Vec<u8>)>,
}

pub fn predict(model: &UNetModel, sample: &Sample, static_map: Option<&StaticMap>, flags: &FeatureFlags) -> Result<Prediction> {
    check_model_flags(model, flags)?;
    if flags.static_map && static_map.is_none() {
        return Err(Error::Config("the model uses static map features but none was given".into()));
    }
    let x = assemble_input(sample, static_map, flags)?;
    let (out, maps) = model.attention_maps(&x)?;
    let frames = output_to_frames(&out)?;
    let attention = maps
        .iter()
        .map(|m: &Tensor<f32>| {
            let (h, w, _) = m.hwc()?;
            Ok((h, w, m.data().iter().map(|&a| unit_to_byte(a)).collect()))
        })
        .collect::<Result<_>>()?;
    Ok(Prediction { frames, attention })
}
