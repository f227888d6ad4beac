use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network family.
///
/// `Linear` is a single affine layer trained by the same optimizers; it is
/// not one of the four forecasting architectures but gives the convex
/// reference problems used by the curvature and intervention checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Cnn,
    Lstm,
    Transformer,
    Linear,
}

impl Arch {
    /// The four neural architectures of the experimental grid, in table order.
    pub const GRID: [Arch; 4] = [Arch::Mlp, Arch::Cnn, Arch::Lstm, Arch::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
            Arch::Lstm => "lstm",
            Arch::Transformer => "transformer",
            Arch::Linear => "linear",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Arch::Mlp),
            "cnn" => Ok(Arch::Cnn),
            "lstm" => Ok(Arch::Lstm),
            "transformer" => Ok(Arch::Transformer),
            "linear" => Ok(Arch::Linear),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Architecture and layer sizes. `Default` gives the full-size networks:
/// MLP `[512, 256, 256, 128]`; CNN channels `[64, 128, 256]`, kernel 8,
/// padding 1, pooled to 16, head `[512, 256]`; LSTM 2×256; Transformer with
/// 2 pre-norm layers, `d_model` 128, 8 heads, head `[128, 64]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub lookback: usize,
    pub mlp_hidden: Vec<usize>,
    pub cnn_channels: Vec<usize>,
    pub cnn_kernel: usize,
    pub cnn_padding: usize,
    pub cnn_pool: usize,
    pub cnn_head: Vec<usize>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub tf_d_model: usize,
    pub tf_heads: usize,
    pub tf_layers: usize,
    pub tf_ff_mult: usize,
    pub tf_head: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp,
            lookback: 100,
            mlp_hidden: vec![512, 256, 256, 128],
            cnn_channels: vec![64, 128, 256],
            cnn_kernel: 8,
            cnn_padding: 1,
            cnn_pool: 16,
            cnn_head: vec![512, 256],
            lstm_hidden: 256,
            lstm_layers: 2,
            tf_d_model: 128,
            tf_heads: 8,
            tf_layers: 2,
            tf_ff_mult: 4,
            tf_head: vec![128, 64],
        }
    }
}

impl ModelConfig {
    /// Full-size dimensions for `arch`.
    pub fn full(arch: Arch, lookback: usize) -> Self {
        Self {
            arch,
            lookback,
            ..Self::default()
        }
    }

    /// Narrow variants of every architecture that train in seconds on a
    /// laptop. Same depth and layer types as [`ModelConfig::full`].
    pub fn desk(arch: Arch, lookback: usize) -> Self {
        Self {
            arch,
            lookback,
            mlp_hidden: vec![32, 16, 16, 8],
            cnn_channels: vec![4, 8, 8],
            cnn_kernel: 8,
            cnn_padding: 1,
            cnn_pool: 8,
            cnn_head: vec![16, 8],
            lstm_hidden: 8,
            lstm_layers: 2,
            tf_d_model: 8,
            tf_heads: 2,
            tf_layers: 2,
            tf_ff_mult: 2,
            tf_head: vec![8, 8],
        }
    }

    /// Very small variants (well under 5k parameters) for exhaustive
    /// finite-difference checks.
    pub fn tiny(arch: Arch, lookback: usize) -> Self {
        Self {
            arch,
            lookback,
            mlp_hidden: vec![6, 5, 4, 3],
            cnn_channels: vec![2, 3, 3],
            cnn_kernel: 3,
            cnn_padding: 1,
            cnn_pool: 3,
            cnn_head: vec![5, 4],
            lstm_hidden: 4,
            lstm_layers: 2,
            tf_d_model: 4,
            tf_heads: 2,
            tf_layers: 2,
            tf_ff_mult: 2,
            tf_head: vec![4, 3],
        }
    }

    /// Sequence length after the three convolutions.
    pub fn cnn_conv_len(&self) -> Option<usize> {
        let mut t = self.lookback;
        for _ in &self.cnn_channels {
            t = (t + 2 * self.cnn_padding).checked_sub(self.cnn_kernel)? + 1;
        }
        Some(t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.lookback == 0 {
            return bad("lookback must be positive");
        }
        match self.arch {
            Arch::Mlp => {
                if self.mlp_hidden.iter().any(|&d| d == 0) {
                    return bad("mlp_hidden entries must be positive");
                }
            }
            Arch::Cnn => {
                if self.cnn_channels.is_empty()
                    || self.cnn_channels.iter().any(|&d| d == 0)
                    || self.cnn_head.iter().any(|&d| d == 0)
                    || self.cnn_kernel == 0
                    || self.cnn_pool == 0
                {
                    return bad("cnn dimensions must be positive");
                }
                match self.cnn_conv_len() {
                    Some(t) if t >= 1 => {}
                    _ => return bad("lookback too short for the convolution stack"),
                }
            }
            Arch::Lstm => {
                if self.lstm_hidden == 0 || self.lstm_layers == 0 {
                    return bad("lstm dimensions must be positive");
                }
            }
            Arch::Transformer => {
                if self.tf_d_model == 0
                    || self.tf_heads == 0
                    || self.tf_layers == 0
                    || self.tf_ff_mult == 0
                    || self.tf_head.iter().any(|&d| d == 0)
                {
                    return bad("transformer dimensions must be positive");
                }
                if self.tf_d_model % self.tf_heads != 0 {
                    return bad("tf_heads must divide tf_d_model");
                }
            }
            Arch::Linear => {}
        }
        Ok(())
    }
}
