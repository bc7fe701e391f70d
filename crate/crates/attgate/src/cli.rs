//! Command-line definitions and drivers for `attgate`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use attgate_core::data::Split;
use attgate_core::synth::SynthParams;
use attgate_core::training::MetricsRecord;
use attgate_core::{extract_sample, FeatureFlags};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ConfigLayer, FeatureSection, ModelSection, RunConfig, TrainSection};
use crate::dataset::Dataset;
use crate::error::{Error, IoContext, Result};
use crate::generate::{generate, GenOptions};
use crate::tmov::{write_tmov, Header, Role, Tmov};
use crate::trainer::{evaluate, evaluate_persistence, predict, TrainOptions, Trainer};

pub const RUN_MANIFEST: &str = "run.toml";

#[derive(Parser, Debug)]
#[command(name = "attgate", version, about = "Attention-gated U-Net traffic forecaster", args_conflicts_with_subcommands = true)]
pub struct Cli {
    /// Re-run the command recorded in a run manifest.
    #[arg(long, value_name = "RUN_TOML")]
    pub from_manifest: Option<PathBuf>,
    /// With --from-manifest, write outputs here instead of the recorded directory.
    #[arg(long, requires = "from_manifest")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Write a synthetic city: static map, daily movies and manifests.
    Gen(GenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Predict six frames for one anchor and export attention maps.
    Predict(PredictArgs),
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 56)]
    pub width: usize,
    #[arg(long, default_value_t = 7)]
    pub days: usize,
    #[arg(long, default_value_t = 0)]
    pub val_days: usize,
    /// First calendar date, YYYY-MM-DD.
    #[arg(long, default_value = "2019-01-01")]
    pub start: NaiveDate,
    #[arg(long, default_value_t = 0.3)]
    pub road_density: f64,
    #[arg(long, default_value = "synth")]
    pub city: String,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flag overrides shared by every command that builds a configuration.
#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigArgs {
    /// TOML file with [model], [train] and [features] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Comma-separated evaluation steps.
    #[arg(long, value_delimiter = ',')]
    pub eval_at: Option<Vec<u64>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub growth: Option<usize>,
    #[arg(long)]
    pub norm_groups: Option<usize>,
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub no_static: bool,
    #[arg(long)]
    pub no_weekday: bool,
    #[arg(long)]
    pub no_time: bool,
    /// Predict only the first N channels of each target frame.
    #[arg(long)]
    pub target_channels: Option<usize>,
    /// Record wall-clock seconds in the metrics file.
    #[arg(long)]
    pub timed: bool,
}

impl ConfigArgs {
    fn flag_layer(&self) -> ConfigLayer {
        let off = |b: bool| if b { Some(false) } else { None };
        ConfigLayer {
            model: ModelSection {
                depth: self.depth,
                base_channels: self.base_channels,
                growth: self.growth,
                norm_groups: self.norm_groups,
                attention: off(self.no_attention),
                ..Default::default()
            },
            train: TrainSection {
                batch_size: self.batch_size,
                learning_rate: self.lr,
                steps: self.steps,
                eval_at: self.eval_at.clone(),
                seed: self.seed,
                deterministic: off(self.timed),
            },
            features: FeatureSection {
                static_map: off(self.no_static),
                weekday: off(self.no_weekday),
                time: off(self.no_time),
                target_channels: self.target_channels,
            },
        }
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let file = self.config.as_deref().map(ConfigLayer::load).transpose()?;
        RunConfig::resolve(file.iter().chain([&self.flag_layer()]))
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training manifest; repeat for several cities.
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// Validation manifest; repeatable.
    #[arg(long = "val-manifest")]
    pub val_manifests: Vec<PathBuf>,
    /// Interleave cities round-robin.
    #[arg(long)]
    pub multi_city: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// Add a persistence-baseline row.
    #[arg(long)]
    pub baseline: bool,
    /// Also print errors in raw byte units (multiplied by 255 squared).
    #[arg(long)]
    pub scaled: bool,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub movie: PathBuf,
    /// Static map; needed when the model was trained with static features.
    #[arg(long = "static")]
    pub static_map: Option<PathBuf>,
    /// Index of the last input frame, 11..=275.
    #[arg(long)]
    pub anchor: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// What a run did, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub command: Command,
    /// Fully resolved configuration for commands that build one.
    pub config: Option<ConfigLayer>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join(RUN_MANIFEST);
        std::fs::write(&path, text).at(&path)
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).at(p)
}

impl Command {
    fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Command::Gen(a) => &mut a.out,
            Command::Train(a) => &mut a.out,
            Command::Eval(a) => &mut a.out,
            Command::Predict(a) => &mut a.out,
        }
    }

    /// Makes every path absolute so the manifest replays from any directory.
    fn absolutize(&mut self) -> Result<()> {
        let abs_all = |v: &mut Vec<PathBuf>| -> Result<()> {
            for p in v.iter_mut() {
                *p = absolute(p)?;
            }
            Ok(())
        };
        match self {
            Command::Gen(a) => a.out = absolute(&a.out)?,
            Command::Train(a) => {
                abs_all(&mut a.manifests)?;
                abs_all(&mut a.val_manifests)?;
                a.resume = a.resume.as_deref().map(absolute).transpose()?;
                a.config.config = a.config.config.as_deref().map(absolute).transpose()?;
                a.out = absolute(&a.out)?;
            }
            Command::Eval(a) => {
                a.checkpoint = absolute(&a.checkpoint)?;
                abs_all(&mut a.manifests)?;
                a.out = absolute(&a.out)?;
            }
            Command::Predict(a) => {
                a.checkpoint = absolute(&a.checkpoint)?;
                a.movie = absolute(&a.movie)?;
                a.static_map = a.static_map.as_deref().map(absolute).transpose()?;
                a.out = absolute(&a.out)?;
            }
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match (cli.from_manifest, cli.command) {
        (Some(path), _) => {
            let m = RunManifest::load(&path)?;
            let mut command = m.command;
            if let Some(out) = cli.out {
                *command.out_mut() = out;
            }
            execute(command, m.config)
        }
        (None, Some(command)) => execute(command, None),
        (None, None) => Err(Error::Config("no command given; see --help".into())),
    }
}

/// Runs `command`. A `replay` configuration replaces the file and flag layers.
pub fn execute(mut command: Command, replay: Option<ConfigLayer>) -> Result<()> {
    command.absolutize()?;
    match &command {
        Command::Gen(a) => cmd_gen(a, &command),
        Command::Train(a) => {
            let cfg = match &replay {
                Some(layer) => RunConfig::resolve([layer])?,
                None => a.config.resolve()?,
            };
            cmd_train(a, cfg, &command)
        }
        Command::Eval(a) => cmd_eval(a, &command),
        Command::Predict(a) => cmd_predict(a, &command),
    }
}

fn write_run(dir: &Path, command: &Command, seed: u64, config: Option<ConfigLayer>) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    RunManifest { tool_version: env!("CARGO_PKG_VERSION").into(), seed, command: command.clone(), config }.save(dir)
}

pub fn cmd_gen(a: &GenArgs, command: &Command) -> Result<()> {
    let mut params = SynthParams::default();
    if let Some(s) = a.noise_std {
        params.noise_std = s;
    }
    let opts = GenOptions {
        seed: a.seed,
        height: a.height,
        width: a.width,
        days: a.days,
        val_days: a.val_days,
        start: a.start,
        road_density: a.road_density,
        city: a.city.clone(),
        params,
    };
    let g = generate(&a.out, &opts)?;
    write_run(&a.out, command, a.seed, None)?;
    println!("wrote {} movies, 1 static map and {}", g.movies.len(), g.manifest.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, cfg: RunConfig, command: &Command) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(cfg, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    let seed = trainer.cfg.train.seed;
    let train = Arc::new(Dataset::open(&a.manifests, Split::Train, seed, a.multi_city)?);
    let val = if a.val_manifests.is_empty() {
        None
    } else {
        Some(Arc::new(Dataset::open(&a.val_manifests, Split::Validation, seed, a.multi_city)?))
    };
    write_run(&a.out, command, seed, Some(ConfigLayer::resolved(&trainer.cfg)))?;
    let layout_path = a.out.join("layout.txt");
    std::fs::write(&layout_path, trainer.layout.to_text()).at(&layout_path)?;
    println!(
        "training {} parameters on {} anchors for {} steps",
        trainer.model.parameter_count(),
        train.index.len(),
        trainer.cfg.train.max_steps
    );
    let opts = TrainOptions { out_dir: Some(a.out.clone()), workers: a.workers, verbose: true, ..TrainOptions::default() };
    trainer.run(train, val, &opts)?;
    println!("done at step {}", trainer.step);
    Ok(())
}

fn print_row(label: &str, r: &MetricsRecord, scaled: bool) {
    let mut line = format!("{label:<12} {:>6}  {:.9}", r.step, r.mse);
    for h in r.mse_horizons {
        line += &format!("  {h:.9}");
    }
    if scaled {
        line += &format!("  raw {:.3}", r.mse * 255.0 * 255.0);
    }
    println!("{line}");
}

pub fn cmd_eval(a: &EvalArgs, command: &Command) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let flags: FeatureFlags = ckpt.layout.flags;
    let data = Arc::new(Dataset::open(&a.manifests, Split::Validation, 0, false)?);
    data.check_flags(&flags)?;
    write_run(&a.out, command, 0, None)?;
    println!("{:<12} {:>6}  {:<11}  +5min .. +60min", "model", "step", "mse");
    let rec = evaluate(&model, Arc::clone(&data), &flags, a.workers)?.record(ckpt.step, Split::Validation, 0.0);
    print_row("attgate", &rec, a.scaled);
    let mut csv = format!("{}\n{}\n", MetricsRecord::CSV_HEADER, rec.csv_row());
    if a.baseline {
        let base = evaluate_persistence(&data, &flags)?.record(ckpt.step, Split::Validation, 0.0);
        print_row("persistence", &base, a.scaled);
        csv += &base.csv_row().replacen(",val,", ",persistence,", 1);
        csv.push('\n');
    }
    let path = a.out.join("eval.csv");
    std::fs::write(&path, csv).at(&path)
}

pub fn cmd_predict(a: &PredictArgs, command: &Command) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let flags = ckpt.layout.flags;
    let movie = crate::tmov::read_tmov(&a.movie)?.into_movie(&a.movie)?;
    let static_map = match &a.static_map {
        Some(p) => {
            let s = crate::tmov::read_tmov(p)?.into_static(p)?;
            if (s.height(), s.width()) != (movie.height(), movie.width()) {
                return Err(Error::Config(format!("static map {} does not match the movie extent", p.display())));
            }
            Some(s)
        }
        None => None,
    };
    let sample = extract_sample(&movie, a.anchor)?;
    let pred = predict(&model, &sample, static_map.as_ref(), &flags)?;
    write_run(&a.out, command, 0, None)?;
    let (h, w) = (movie.height(), movie.width());
    let meta = |role, dims| Header { city: movie.city.clone(), date: Some(movie.date), anchor: Some(a.anchor), ..Header::new(role, dims) };
    let shape = vec![attgate_core::data::HORIZONS, h, w, attgate_core::data::CHANNELS];
    write_tmov(&a.out.join("prediction.tmov"), &Tmov::new(meta(Role::Prediction, shape), pred.frames)?)?;
    for (i, (ah, aw, bytes)) in pred.attention.into_iter().enumerate() {
        write_tmov(&a.out.join(format!("attention_{i}.tmov")), &Tmov::new(meta(Role::Attention, vec![ah, aw, 1]), bytes)?)?;
    }
    println!("wrote predictions for anchor {} to {}", a.anchor, a.out.display());
    Ok(())
}
