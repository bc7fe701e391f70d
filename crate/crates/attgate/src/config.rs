//! Run configuration as TOML, resolved as defaults < config file < flags.

use std::path::Path;

use attgate_core::nn::StageOrder;
use attgate_core::{FeatureFlags, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub depth: Option<usize>,
    pub base_channels: Option<usize>,
    pub channel_multiplier: Option<usize>,
    pub growth: Option<usize>,
    pub attention: Option<bool>,
    pub norm_groups: Option<usize>,
    pub norm_epsilon: Option<f64>,
    pub stage_order: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub steps: Option<u64>,
    pub eval_at: Option<Vec<u64>>,
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    pub static_map: Option<bool>,
    pub weekday: Option<bool>,
    pub time: Option<bool>,
    pub target_channels: Option<usize>,
}

/// A partial configuration. Files, flags and run manifests all use this
/// shape; a resolved configuration has every field set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub features: FeatureSection,
}

/// Model and training settings after every layer has been applied.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::default(), train: TrainConfig::default() }
    }
}

fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
    if let Some(v) = src {
        *dst = v.clone();
    }
}

impl ConfigLayer {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config layers always serialize")
    }

    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let (m, s) = (&mut cfg.model, &self.model);
        set(&mut m.depth, &s.depth);
        set(&mut m.base_channels, &s.base_channels);
        set(&mut m.channel_multiplier, &s.channel_multiplier);
        set(&mut m.growth, &s.growth);
        set(&mut m.attention_enabled, &s.attention);
        set(&mut m.norm_groups, &s.norm_groups);
        set(&mut m.norm_epsilon, &s.norm_epsilon);
        if let Some(o) = &s.stage_order {
            m.stage_order = StageOrder::parse(o).ok_or_else(|| Error::Config(format!("unknown stage_order {o:?}")))?;
        }
        let (t, s) = (&mut cfg.train, &self.train);
        set(&mut t.batch_size, &s.batch_size);
        set(&mut t.learning_rate, &s.learning_rate);
        set(&mut t.max_steps, &s.steps);
        set(&mut t.eval_at, &s.eval_at);
        set(&mut t.seed, &s.seed);
        set(&mut t.deterministic, &s.deterministic);
        let (f, s) = (&mut t.flags, &self.features);
        set(&mut f.static_map, &s.static_map);
        set(&mut f.weekday, &s.weekday);
        set(&mut f.time, &s.time);
        set(&mut f.target_channels, &s.target_channels);
        Ok(())
    }

    /// The fully populated layer describing `cfg`.
    pub fn resolved(cfg: &RunConfig) -> Self {
        let (m, t, f) = (&cfg.model, &cfg.train, &cfg.train.flags);
        ConfigLayer {
            model: ModelSection {
                depth: Some(m.depth),
                base_channels: Some(m.base_channels),
                channel_multiplier: Some(m.channel_multiplier),
                growth: Some(m.growth),
                attention: Some(m.attention_enabled),
                norm_groups: Some(m.norm_groups),
                norm_epsilon: Some(m.norm_epsilon),
                stage_order: Some(m.stage_order.as_str().to_string()),
            },
            train: TrainSection {
                batch_size: Some(t.batch_size),
                learning_rate: Some(t.learning_rate),
                steps: Some(t.max_steps),
                eval_at: Some(t.eval_at.clone()),
                seed: Some(t.seed),
                deterministic: Some(t.deterministic),
            },
            features: FeatureSection {
                static_map: Some(f.static_map),
                weekday: Some(f.weekday),
                time: Some(f.time),
                target_channels: Some(f.target_channels),
            },
        }
    }
}

impl RunConfig {
    /// Applies `layers` in order over the defaults, drops evaluation steps
    /// beyond the step budget when the budget was lowered, and validates.
    pub fn resolve<'a>(layers: impl IntoIterator<Item = &'a ConfigLayer>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut eval_given = false;
        for layer in layers {
            layer.apply(&mut cfg)?;
            eval_given |= layer.train.eval_at.is_some();
        }
        if !eval_given {
            let max = cfg.train.max_steps;
            cfg.train.eval_at.retain(|&s| s <= max);
            if cfg.train.eval_at.last() != Some(&max) {
                cfg.train.eval_at.push(max);
            }
        }
        cfg.sync_channels();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Input and output widths follow from the feature flags.
    pub fn sync_channels(&mut self) {
        self.model.in_channels = self.train.flags.input_channels();
        self.model.out_channels = self.train.flags.output_channels();
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let f: &FeatureFlags = &self.train.flags;
        if self.model.in_channels != f.input_channels() || self.model.out_channels != f.output_channels() {
            return Err(Error::Config(format!(
                "model expects {} inputs and {} outputs, features give {} and {}",
                self.model.in_channels,
                self.model.out_channels,
                f.input_channels(),
                f.output_channels()
            )));
        }
        Ok(())
    }
}
