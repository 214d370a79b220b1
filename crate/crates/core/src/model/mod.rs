//! Transformer encoder-decoder with an analytic backward pass.
//!
//! Post-norm layers (sublayer, dropout, residual add, layer norm), ReLU
//! feed-forward blocks, sinusoidal positions and no weight tying. The encoder
//! reads either unit tokens through an embedding table or stacked feature
//! frames through a bias-free projection.

pub mod gradcheck;
mod network;
pub mod ops;
pub mod params;
pub mod scalar;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqprep::{vocab_size, NUM_SPECIALS, SEQ_LEN};

pub use network::{
    backward, encode, forward, greedy_step_logits, loss, loss_and_grad, targets_for, Cache, EncoderOutput,
    ForwardOptions, ForwardOutput, IncrementalDecoder, Logits,
};
pub use ops::{attention, positional_encoding, MASK_VALUE};
pub use params::{init_params, Gradients, Layout, Params, Tensor};
pub use scalar::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("positional encoding needs an even dimension, got {0}")]
    OddDim(usize),
    #[error("backward called without cached activations")]
    MissingCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Frontend {
    /// Unit tokens through an embedding table.
    Discrete,
    /// `stack_factor` consecutive feature frames per encoder position.
    Continuous { feature_dim: usize, stack_factor: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub vocab: usize,
    pub max_len: usize,
    pub frontend: Frontend,
}

impl ModelConfig {
    /// Unit-to-unit model: 512 dims, 3+3 layers, one head, 2048 FFN.
    pub fn unit_to_unit(k: usize) -> Self {
        Self {
            d_model: 512,
            heads: 1,
            enc_layers: 3,
            dec_layers: 3,
            ffn_dim: 2048,
            dropout: 0.1,
            vocab: vocab_size(k),
            max_len: SEQ_LEN,
            frontend: Frontend::Discrete,
        }
    }

    /// Feature-input baseline: 256 dims, 6+6 layers, four heads.
    pub fn speech_to_unit(k: usize, feature_dim: usize, stack_factor: usize) -> Self {
        Self {
            d_model: 256,
            heads: 4,
            enc_layers: 6,
            dec_layers: 6,
            ffn_dim: 2048,
            dropout: 0.1,
            vocab: vocab_size(k),
            max_len: SEQ_LEN,
            frontend: Frontend::Continuous {
                feature_dim,
                stack_factor,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.heads == 0 || self.enc_layers == 0 || self.dec_layers == 0 || self.ffn_dim == 0 {
            return bad("sizes must be >= 1".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(ModelError::OddDim(self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab <= NUM_SPECIALS as usize {
            return bad(format!("vocab {} leaves no unit tokens", self.vocab));
        }
        if self.max_len < 2 {
            return bad("max_len must be >= 2".into());
        }
        if let Frontend::Continuous {
            feature_dim,
            stack_factor,
        } = self.frontend
        {
            if feature_dim == 0 || stack_factor == 0 {
                return bad("feature_dim and stack_factor must be >= 1".into());
            }
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::unit_to_unit(100)
    }
}
