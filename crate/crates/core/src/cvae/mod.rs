//! Conditional variational autoencoder over tokenized DFS codes.
//!
//! The encoder LSTM reads a code (condition appended to every step) and
//! produces a diagonal Gaussian over the latent space. The decoder LSTM
//! starts from a state projected from `z` and predicts the next tuple's five
//! components with independent softmax heads.

mod checkpoint;
mod generate;
mod model;
mod vocab;

use std::fmt;
use std::str::FromStr;

use cvaegg_autodiff::TensorError;
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CheckpointError, TrainState,
};
pub use generate::{GenerateOptions, Generated, Rejection};
pub use model::{
    embedding_widths, kl_divergence, kl_divergence_values, lstm_cell, reparameterize, Bound,
    CvaeModel, LossTerms, LstmState,
};
pub use vocab::{TokenizedTuple, Vocabularies, COMPONENTS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CvaeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label {0} is not a reciprocal degree in the vocabulary")]
    UnknownLabel(f64),
    #[error("edge label {0} is not in the vocabulary")]
    UnknownEdgeLabel(u32),
    #[error("timestamp {timestamp} exceeds the {max_nodes}-node vocabulary")]
    TimestampOutOfRange { timestamp: usize, max_nodes: usize },
    #[error("token index {index} is not valid for component {component}")]
    BadToken { component: usize, index: usize },
    #[error("token sequence has no EOS row")]
    MissingEos,
    #[error("condition has {got} values, model expects {expected}")]
    ConditionWidth { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Where the latent vector enters the decoder besides the initial state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LatentWiring {
    /// `[h; z]` feeds the output heads.
    #[default]
    HiddenConcat,
    /// `z` is appended to every decoder input step.
    InputConcat,
}

impl fmt::Display for LatentWiring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HiddenConcat => "hidden",
            Self::InputConcat => "input",
        })
    }
}

impl FromStr for LatentWiring {
    type Err = CvaeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hidden" => Ok(Self::HiddenConcat),
            "input" => Ok(Self::InputConcat),
            _ => Err(CvaeError::Config(format!(
                "unknown latent wiring `{s}` (expected `hidden` or `input`)"
            ))),
        }
    }
}

/// How `weight_decay` acts on the parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecayMode {
    /// Decoupled (AdamW): each step shrinks weights by `lr * weight_decay`.
    #[default]
    Decoupled,
    /// Classic L2: `weight_decay * w` joins the gradient before clipping.
    L2,
}

impl fmt::Display for DecayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Decoupled => "decoupled",
            Self::L2 => "l2",
        })
    }
}

impl FromStr for DecayMode {
    type Err = CvaeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "decoupled" => Ok(Self::Decoupled),
            "l2" => Ok(Self::L2),
            _ => Err(CvaeError::Config(format!(
                "unknown decay mode `{s}` (expected `decoupled` or `l2`)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparams {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decay: DecayMode,
    pub clip_threshold: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Decoder step budget at generation time. `None` means
    /// `2 * (largest edge count in the training corpus) + 1`.
    pub max_seq_len: Option<usize>,
    pub kl_weight: f64,
    pub wiring: LatentWiring,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            embed_dim: 128,
            latent_dim: 20,
            lr: 0.001,
            weight_decay: 0.01,
            decay: DecayMode::Decoupled,
            clip_threshold: 0.015,
            batch_size: 60,
            epochs: 400,
            max_seq_len: None,
            kl_weight: 1.0,
            wiring: LatentWiring::HiddenConcat,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), CvaeError> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("latent_dim", self.latent_dim),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(CvaeError::Config(format!("{name} must be positive")));
        }
        if self.max_seq_len == Some(0) {
            return Err(CvaeError::Config("max_seq_len must be positive".into()));
        }
        let reals = [("lr", self.lr), ("clip_threshold", self.clip_threshold)];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(CvaeError::Config(format!(
                "{name} must be positive, got {v}"
            )));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("kl_weight", self.kl_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CvaeError::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// The generation step budget, resolving the corpus-derived default.
    pub fn resolved_max_len(&self, corpus_max_edges: usize) -> usize {
        self.max_seq_len.unwrap_or(2 * corpus_max_edges + 1)
    }
}
