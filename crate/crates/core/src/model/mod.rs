//! The decoder-only forecaster.
//!
//! Patches are embedded by a shared residual block, separators are filled with
//! one learnable vector, a stack of pre-norm causal transformer layers mixes
//! tokens (no positional encodings anywhere), and a shared output residual
//! block maps every token to the next `h` points of its example.

mod forecast;
mod network;
mod params;

pub use forecast::{forecast, forecast_block, Forecast, Scaler, STD_FLOOR};
pub use network::{
    build_attention_mask, embed_tokens, forward, forward_graph, AttentionMask, TokenizedContext,
};
pub use params::{
    init_separator, InitKind, ModelParams, Params, ResidualBlock, TransformerLayer, SEPARATOR,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Validation(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input patch length `p`.
    pub patch_len: usize,
    /// Output patch length `h`.
    pub horizon_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Longest example window `T`.
    pub max_len: usize,
    /// Most examples per context, target included.
    pub max_examples: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Laptop-sized defaults.
    pub fn desk() -> Self {
        Self {
            patch_len: 8,
            horizon_len: 16,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 64,
            max_len: 80,
            max_examples: 16,
            activation: Activation::Relu,
        }
    }

    /// The 200M-parameter shape: p=32, h=128, 20 layers of width 1280 with
    /// 16 heads, windows of 640 points and up to 50 examples.
    pub fn production() -> Self {
        Self {
            patch_len: 32,
            horizon_len: 128,
            d_model: 1280,
            n_layers: 20,
            n_heads: 16,
            d_ff: 1280,
            max_len: 640,
            max_examples: 50,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_len", self.patch_len),
            ("horizon_len", self.horizon_len),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("max_examples", self.max_examples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Validation(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.patch_len >= self.max_len {
            return Err(Error::Validation(
                "model.patch_len must be below model.max_len".into(),
            ));
        }
        if self.horizon_len >= self.max_len {
            return Err(Error::Validation(
                "model.horizon_len must be below model.max_len".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Longest history a forecast reads: the window length minus one output
    /// patch.
    pub fn max_history(&self) -> usize {
        self.max_len - self.horizon_len
    }
}
