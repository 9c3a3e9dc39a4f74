//! A small Transformer encoder classifier.
//!
//! Tokens are linearly embedded, a learned CLS vector is prepended, learned
//! positional embeddings are added, and `layers` blocks of attention and
//! feed-forward sublayers follow. The final CLS row feeds a linear head.
//!
//! Weight matrices are stored `out x in` and applied as `X W^T`, so
//! `Q = X W_q^T`, `W_ff1` is `d_ff x d` and `W_ff2` is `d x d_ff`.

mod dropout;
mod forward;
mod params;

pub use dropout::{apply_implicit_dropout, DropoutMode, DropoutPlacement, DROPKEY_SENTINEL};
pub use forward::{attention, feed_forward, forward, project_qkv, ForwardTrace, LayerTrace};
pub use params::{BoundLayer, BoundParams, EncoderParams, LayerParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where layer normalization sits relative to each residual sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `x + f(norm(x))`, with a final norm before the head.
    #[default]
    Pre,
    /// `norm(x + f(x))`.
    Post,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width of each raw input token.
    pub input_dim: usize,
    /// Maximum number of input tokens (the CLS token is extra).
    pub max_tokens: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    #[serde(default = "one")]
    pub heads: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub norm: NormPlacement,
}

fn one() -> usize {
    1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("max_tokens", self.max_tokens),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("layers", self.layers),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(alloc::format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::contract("model.d_model must be divisible by model.heads"));
        }
        if self.num_classes < 2 {
            return Err(Error::contract("model.num_classes must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
