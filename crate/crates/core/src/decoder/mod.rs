//! Radar decoders: rendered ray features to per-ray Bernoulli parameters.
//!
//! Four interchangeable trunks share the same output heads:
//!
//! * `Tabular` keeps free per-ray parameters and ignores the features.
//! * `Mlp` applies one shared two-layer perceptron to every ray.
//! * `TransformerEncoder` runs softmax self-attention across all rays.
//! * `NaiveQuery` lets a fixed set of learned queries cross-attend to the
//!   ray features and predicts absolute positions with no geometric anchor.
//!
//! Offsets are bounded by `max_offset * tanh(raw)`. Forward and backward
//! passes are written out by hand.

mod emit;
mod network;
mod train;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use emit::{emit_deterministic, emit_probabilistic};
pub use network::{embed_and_fuse, Decoder, DecoderInputs};
pub use train::{fit, learning_rate, render_scan, Adam, FitResult, TrainConfig};
pub use weights::{DecoderWeights, WeightGradients, WEIGHTS_MAGIC};

/// Initial existence probability of every ray.
pub const INITIAL_EXISTENCE: f64 = 0.1;
/// Initial per-axis spatial scale in meters.
pub const INITIAL_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Tabular,
    Mlp,
    TransformerEncoder,
    NaiveQuery,
}

impl std::str::FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(Self::Tabular),
            "mlp" => Ok(Self::Mlp),
            "transformer_encoder" | "transformer" => Ok(Self::TransformerEncoder),
            "naive_query" => Ok(Self::NaiveQuery),
            other => Err(Error::Config(format!("unknown decoder variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub variant: DecoderVariant,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_offset: f64,
    pub probabilistic: bool,
    /// Force offsets to zero so points sit exactly on the ray returns.
    #[serde(default)]
    pub baseline_zero_offset: bool,
    /// Meters per unit of raw head output for the anchor-free query decoder.
    #[serde(default = "default_query_position_scale")]
    pub query_position_scale: f64,
}

fn default_query_position_scale() -> f64 {
    10.0
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            variant: DecoderVariant::TransformerEncoder,
            feature_dim: 32,
            hidden_dim: 32,
            num_heads: 2,
            num_layers: 1,
            max_offset: 1.5,
            probabilistic: true,
            baseline_zero_offset: false,
            query_position_scale: default_query_position_scale(),
        }
    }
}

impl DecoderConfig {
    /// Zero-offset deterministic MLP: points are the thresholded ray returns.
    pub fn baseline() -> Self {
        Self {
            variant: DecoderVariant::Mlp,
            probabilistic: false,
            baseline_zero_offset: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("decoder: {m}")));
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.num_heads == 0 {
            return fail("dimensions must be at least 1");
        }
        if !self.feature_dim.is_multiple_of(self.num_heads) {
            return fail("feature_dim must be divisible by num_heads");
        }
        if !(self.max_offset > 0.0) || !self.max_offset.is_finite() {
            return fail("max_offset must be positive");
        }
        if !(self.query_position_scale > 0.0) {
            return fail("query_position_scale must be positive");
        }
        if matches!(
            self.variant,
            DecoderVariant::TransformerEncoder | DecoderVariant::NaiveQuery
        ) && self.num_layers == 0
        {
            return fail("attention decoders need at least one layer");
        }
        Ok(())
    }
}
