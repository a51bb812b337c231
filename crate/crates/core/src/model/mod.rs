//! Annotator-query network: a frozen projection encoder, a query block in
//! which one learnable query per annotator attends to the other queries and
//! then to the feature tokens, and per-annotator classifier heads.

mod checkpoint;
mod forward;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{matmul, Matrix, NumericsError, ParamStore};
use crate::seed::rng_for;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use forward::{AttentionRecord, BatchOutput, PredictionSet};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model has no parameter {0:?} (variant {1})")]
    MissingParameter(String, Variant),
    #[error("input width {got} does not match expected {expected}")]
    Width { expected: usize, got: usize },
    #[error("input has {got} tokens, model expects {expected}")]
    Tokens { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which forward path (and therefore which parameters) a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "camelCase")]
pub enum Variant {
    /// Queries with self-attention, cross-attention and one head per annotator.
    Full,
    /// Mean-pooled encoder tokens straight into per-annotator heads.
    Base,
    /// Full query block with one classifier shared by every annotator.
    UnifiedHead,
    /// Query block without the query self-attention sublayer.
    NoSelfAttn,
    /// Annotator features averaged into one consensus classifier.
    PooledPremv,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::Base, Variant::UnifiedHead, Variant::NoSelfAttn, Variant::PooledPremv];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Base => "base",
            Variant::UnifiedHead => "unifiedHead",
            Variant::NoSelfAttn => "noSelfAttn",
            Variant::PooledPremv => "pooledPremv",
        }
    }

    pub fn uses_queries(self) -> bool {
        self != Variant::Base
    }

    pub fn uses_self_attention(self) -> bool {
        matches!(self, Variant::Full | Variant::UnifiedHead | Variant::PooledPremv)
    }

    /// Number of classifier heads the variant owns.
    pub fn head_count(self, num_annotators: usize) -> usize {
        match self {
            Variant::Full | Variant::Base | Variant::NoSelfAttn => num_annotators,
            Variant::UnifiedHead | Variant::PooledPremv => 1,
        }
    }

    /// True when the variant predicts one consensus distribution per sample.
    pub fn is_consensus(self) -> bool {
        self == Variant::PooledPremv
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant {s:?} (expected one of full, base, unifiedHead, noSelfAttn, pooledPremv)"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelConfig {
    pub num_annotators: usize,
    pub num_classes: usize,
    pub num_tokens: usize,
    pub raw_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Stacked query blocks; one block already holds every mechanism.
    #[serde(default = "one")]
    pub num_blocks: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_annotators: 5,
            num_classes: 4,
            num_tokens: 8,
            raw_dim: 4,
            hidden_dim: 48,
            num_heads: 12,
            ffn_dim: 96,
            num_blocks: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("numAnnotators", self.num_annotators),
            ("numTokens", self.num_tokens),
            ("rawDim", self.raw_dim),
            ("hiddenDim", self.hidden_dim),
            ("numHeads", self.num_heads),
            ("ffnDim", self.ffn_dim),
            ("numBlocks", self.num_blocks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!("numClasses must be at least 2, got {}", self.num_classes)));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "hiddenDim {} is not divisible by numHeads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Frozen `rawDim × d` projection standing in for a pretrained encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStub {
    projection: Matrix,
}

impl EncoderStub {
    /// Entries drawn from N(0, 1/rawDim) on the config's `encoder` stream.
    pub fn new(config: &ModelConfig) -> Self {
        let mut rng = rng_for(config.seed, "encoder");
        let std = (1.0 / config.raw_dim as f64).sqrt();
        Self { projection: Matrix::gaussian(config.raw_dim, config.hidden_dim, std, &mut rng) }
    }

    pub fn from_projection(projection: Matrix) -> Self {
        Self { projection }
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn is_frozen(&self) -> bool {
        true
    }
}

/// Feature tokens `rawTokens × projection`. Never recorded on a tape.
pub fn encode(raw_tokens: &Matrix, encoder: &EncoderStub) -> Result<Matrix, ModelError> {
    let expected = encoder.projection.rows();
    if raw_tokens.cols() != expected {
        return Err(ModelError::Width { expected, got: raw_tokens.cols() });
    }
    Ok(matmul(raw_tokens, &encoder.projection)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    variant: Variant,
    encoder: EncoderStub,
    params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, variant: Variant) -> Result<Self, ModelError> {
        config.validate()?;
        let encoder = EncoderStub::new(&config);
        let mut rng = rng_for(config.seed, "params");
        let params = init_params(&config, variant, &mut rng);
        Ok(Self { config, variant, encoder, params })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        variant: Variant,
        encoder: EncoderStub,
        params: ParamStore,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let reference = init_params(&config, variant, &mut rng_for(0, "shape-check"));
        for (_, name, m) in reference.iter() {
            match params.by_name(name) {
                Some(p) if p.shape() == m.shape() => {}
                Some(p) => {
                    return Err(ModelError::Config(format!(
                        "parameter {name} has shape {}x{}, expected {}x{}",
                        p.rows(),
                        p.cols(),
                        m.rows(),
                        m.cols()
                    )))
                }
                None => return Err(ModelError::MissingParameter(name.to_string(), variant)),
            }
        }
        if params.len() != reference.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} tensors, variant {variant} expects {}",
                params.len(),
                reference.len()
            )));
        }
        if encoder.projection.shape() != (config.raw_dim, config.hidden_dim) {
            return Err(ModelError::Config("encoder projection shape does not match config".into()));
        }
        Ok(Self { config, variant, encoder, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn encoder(&self) -> &EncoderStub {
        &self.encoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) {
        assert_eq!(params.len(), self.params.len(), "parameter store layout changed");
        self.params = params;
    }

    /// Trainable scalars; the frozen encoder is excluded.
    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    pub(crate) fn param(&self, name: &str) -> Result<&Matrix, ModelError> {
        self.params.by_name(name).ok_or_else(|| ModelError::MissingParameter(name.to_string(), self.variant))
    }
}

fn init_params<R: Rng>(config: &ModelConfig, variant: Variant, rng: &mut R) -> ParamStore {
    let (n, d, c, f) = (config.num_annotators, config.hidden_dim, config.num_classes, config.ffn_dim);
    let mut p = ParamStore::new();
    let mut gauss = |p: &mut ParamStore, name: String, rows: usize, cols: usize| {
        p.insert(name, Matrix::gaussian(rows, cols, INIT_STD, rng));
    };
    let norm = |p: &mut ParamStore, prefix: &str| {
        p.insert(format!("{prefix}.ln.gain"), Matrix::filled(1, d, 1.0));
        p.insert(format!("{prefix}.ln.bias"), Matrix::zeros(1, d));
    };

    if variant.uses_queries() {
        gauss(&mut p, "queries".into(), n, d);
        gauss(&mut p, "tokens.pos".into(), config.num_tokens, d);
        for b in 0..config.num_blocks {
            let mut attention = |p: &mut ParamStore, prefix: String| {
                norm(p, &prefix);
                for w in ["wq", "wk", "wv", "wo"] {
                    gauss(p, format!("{prefix}.{w}"), d, d);
                }
                for bias in ["bq", "bk", "bv", "bo"] {
                    p.insert(format!("{prefix}.{bias}"), Matrix::zeros(1, d));
                }
            };
            if variant.uses_self_attention() {
                attention(&mut p, format!("block{b}.self"));
            }
            attention(&mut p, format!("block{b}.cross"));
            let prefix = format!("block{b}.ffn");
            norm(&mut p, &prefix);
            gauss(&mut p, format!("{prefix}.w1"), d, f);
            p.insert(format!("{prefix}.b1"), Matrix::zeros(1, f));
            gauss(&mut p, format!("{prefix}.w2"), f, d);
            p.insert(format!("{prefix}.b2"), Matrix::zeros(1, d));
        }
        norm(&mut p, "out");
    }

    let heads = variant.head_count(n);
    gauss(&mut p, "head.w1".into(), heads * d, d);
    p.insert("head.b1", Matrix::zeros(heads, d));
    gauss(&mut p, "head.w2".into(), heads * d, c);
    p.insert("head.b2", Matrix::zeros(heads, c));
    p
}
