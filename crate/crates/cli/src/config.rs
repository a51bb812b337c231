//! Flat run configuration: one `key = value` per line, TOML syntax.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tendency_core::data::GeneratorConfig;
use tendency_core::harness::ExperimentSpec;
use tendency_core::metrics::ConsistencyMode;
use tendency_core::model::{ModelConfig, Variant};
use tendency_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct RunConfig {
    /// Root of every derived random stream.
    pub seed: u64,

    #[serde(default = "d_samples")]
    pub num_samples: usize,
    #[serde(default = "d_annotators")]
    pub num_annotators: usize,
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_tokens")]
    pub num_tokens: usize,
    #[serde(default = "d_raw")]
    pub raw_dim: usize,
    #[serde(default = "d_groups")]
    pub correlation_groups: Vec<Vec<usize>>,
    #[serde(default = "d_noise")]
    pub noise_rate: f64,
    #[serde(default = "d_jitter")]
    pub decision_jitter: f64,

    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_heads")]
    pub num_heads: usize,
    #[serde(default = "d_ffn")]
    pub ffn_dim: usize,
    #[serde(default = "d_blocks")]
    pub num_blocks: usize,

    #[serde(default = "d_variant")]
    pub variant: Variant,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_clip")]
    pub max_grad_norm: f64,
    #[serde(default = "d_warmup")]
    pub warmup_frac: f64,

    #[serde(default = "d_split")]
    pub split: [f64; 3],
    #[serde(default = "d_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "d_rates")]
    pub sparsity_rates: Vec<f64>,
    /// Experiment seeds; empty means `[seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "d_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub consistency_mode: ConsistencyMode,
}

fn d_samples() -> usize {
    GeneratorConfig::default().num_samples
}
fn d_annotators() -> usize {
    GeneratorConfig::default().num_annotators
}
fn d_classes() -> usize {
    GeneratorConfig::default().num_classes
}
fn d_tokens() -> usize {
    GeneratorConfig::default().num_tokens
}
fn d_raw() -> usize {
    GeneratorConfig::default().raw_dim
}
fn d_groups() -> Vec<Vec<usize>> {
    GeneratorConfig::default().correlation_groups
}
fn d_noise() -> f64 {
    GeneratorConfig::default().noise_rate
}
fn d_jitter() -> f64 {
    GeneratorConfig::default().decision_jitter
}
fn d_hidden() -> usize {
    ModelConfig::default().hidden_dim
}
fn d_heads() -> usize {
    ModelConfig::default().num_heads
}
fn d_ffn() -> usize {
    ModelConfig::default().ffn_dim
}
fn d_blocks() -> usize {
    ModelConfig::default().num_blocks
}
fn d_variant() -> Variant {
    Variant::Full
}
fn d_epochs() -> usize {
    TrainConfig::default().max_epochs
}
fn d_patience() -> usize {
    TrainConfig::default().patience
}
fn d_batch() -> usize {
    TrainConfig::default().batch_size
}
fn d_lr() -> f64 {
    TrainConfig::default().base_lr
}
fn d_wd() -> f64 {
    TrainConfig::default().weight_decay
}
fn d_clip() -> f64 {
    TrainConfig::default().max_grad_norm
}
fn d_warmup() -> f64 {
    TrainConfig::default().warmup_frac
}
fn d_split() -> [f64; 3] {
    let s = ExperimentSpec::default().split;
    [s.0, s.1, s.2]
}
fn d_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn d_rates() -> Vec<f64> {
    vec![0.0, 0.4]
}
fn d_jobs() -> usize {
    1
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

impl RunConfig {
    /// Parses a config document, applying `overrides` (`key=value`) on top.
    /// A manifest is accepted as well: its `[config]` table is used.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if let Some(toml::Value::Table(inner)) = table.get("config") {
            if table.contains_key("command") {
                table = inner.clone();
            }
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("override {o:?} is not key=value")))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(CliError::Validation(format!("config key {key:?}: nested tables are not allowed")));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Validation(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, overrides)
    }

    /// Checks every section against its module's constraints.
    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: String| CliError::Validation(e);
        self.generator().validate().map_err(|e| v(e.to_string()))?;
        self.model().validate().map_err(|e| v(e.to_string()))?;
        self.train_config().validate().map_err(|e| v(e.to_string()))?;
        self.spec().validate().map_err(|e| v(e.to_string()))?;
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            num_samples: self.num_samples,
            num_annotators: self.num_annotators,
            num_classes: self.num_classes,
            num_tokens: self.num_tokens,
            raw_dim: self.raw_dim,
            correlation_groups: self.correlation_groups.clone(),
            noise_rate: self.noise_rate,
            decision_jitter: self.decision_jitter,
            seed: self.seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_annotators: self.num_annotators,
            num_classes: self.num_classes,
            num_tokens: self.num_tokens,
            raw_dim: self.raw_dim,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            num_blocks: self.num_blocks,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            warmup_frac: self.warmup_frac,
            seed: self.seed,
            variant: self.variant,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            generator: self.generator(),
            model: self.model(),
            train: self.train_config(),
            split: (self.split[0], self.split[1], self.split[2]),
            variants: self.variants.clone(),
            sparsity_rates: self.sparsity_rates.clone(),
            seeds: self.seeds(),
            jobs: self.jobs,
        }
    }
}
