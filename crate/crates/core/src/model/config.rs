use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and regularization settings of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Encoded sequence length (text length).
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernel: usize,
    pub avg_pool: usize,
    pub max_pool: usize,
    pub dropout: f64,
    /// Widths of the four dense layers; the last one is the class count.
    pub dense_dims: Vec<usize>,
    pub num_classes: usize,
    /// Hidden-state indices fed to the head (negative counts from the end).
    /// More than one entry averages those states.
    pub tap_layers: Vec<i64>,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(crate::tokenizer::DEFAULT_VOCAB_SIZE)
    }
}

impl ModelConfig {
    /// Small configuration that trains on a laptop CPU in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_len: 128,
            hidden: 64,
            layers: 2,
            heads: 2,
            ff_dim: 256,
            conv_channels: [32, 32, 32],
            conv_kernel: 3,
            avg_pool: 8,
            max_pool: 8,
            dropout: 0.36,
            dense_dims: vec![64, 32, 16, 3],
            num_classes: 3,
            tap_layers: vec![-1],
            layer_norm_eps: 1e-12,
        }
    }

    /// Encoder dimensions of a BERT-base sized multilingual model.
    pub fn base_scale(vocab_size: usize) -> Self {
        Self {
            hidden: 768,
            layers: 12,
            heads: 12,
            ff_dim: 3072,
            conv_channels: [256, 128, 64],
            ..Self::desk(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Sequence lengths after the average and max pooling stages.
    pub fn pooled_lengths(&self) -> (usize, usize) {
        let a = self.max_len / self.avg_pool;
        (a, a / self.max_pool)
    }

    /// Resolves `tap_layers` into hidden-state indices in `0..=layers`.
    pub fn tap_indices(&self) -> Result<Vec<usize>> {
        let n = self.layers as i64 + 1;
        self.tap_layers
            .iter()
            .map(|&i| {
                let idx = if i < 0 { n + i } else { i };
                if (0..n).contains(&idx) {
                    Ok(idx as usize)
                } else {
                    Err(Error::InvalidConfig(format!("tap layer {i} outside 0..={}", self.layers)))
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < crate::tokenizer::SPECIALS.len() {
            return bad(format!("vocab_size {} below the special tokens", self.vocab_size));
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} < 3", self.max_len));
        }
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
            return bad("hidden, layers, heads and ff_dim must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.conv_channels.contains(&0) {
            return bad("conv channels must be positive".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv kernel {} must be odd", self.conv_kernel));
        }
        if self.avg_pool == 0 || !self.max_len.is_multiple_of(self.avg_pool) {
            return bad(format!("max_len {} not divisible by avg pool {}", self.max_len, self.avg_pool));
        }
        let after_avg = self.max_len / self.avg_pool;
        if self.max_pool == 0 || !after_avg.is_multiple_of(self.max_pool) {
            return bad(format!("length {after_avg} not divisible by max pool {}", self.max_pool));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0,1)", self.dropout));
        }
        if self.dense_dims.len() != 4 {
            return bad(format!("expected 4 dense layers, got {}", self.dense_dims.len()));
        }
        if self.dense_dims.contains(&0) {
            return bad("dense widths must be positive".into());
        }
        if self.num_classes != 3 || self.dense_dims[3] != self.num_classes {
            return bad(format!(
                "last dense width {} and num_classes {} must both be 3",
                self.dense_dims[3], self.num_classes
            ));
        }
        if self.tap_layers.is_empty() {
            return bad("tap_layers is empty".into());
        }
        self.tap_indices()?;
        Ok(())
    }

    /// Canonical JSON form stored in checkpoints.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
