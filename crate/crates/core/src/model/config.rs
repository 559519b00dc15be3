use serde::{Deserialize, Serialize};

use crate::corpus::NUM_RESERVED;
use crate::error::{Result, SmdtError};
use crate::layout::HeadAllocation;

/// Network hyperparameters. Defaults are desk-scale; the head count, head
/// allocation, dropout and label smoothing follow the reference setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    /// Encoder blocks; the decoder has the same depth.
    pub num_layers: usize,
    /// How many of the top layers run the two-stream (local + global) attention.
    pub two_stream_top_layers: usize,
    pub head_allocation: HeadAllocation,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub adjacent_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            d_ff: 256,
            num_heads: 8,
            num_layers: 4,
            two_stream_top_layers: 2,
            head_allocation: HeadAllocation::default(),
            dropout: 0.3,
            label_smoothing: 0.1,
            adjacent_window: 1,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn is_two_stream(&self, layer: usize) -> bool {
        layer + self.two_stream_top_layers >= self.num_layers
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SmdtError::Config(msg));
        if self.num_heads == 0 || self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.two_stream_top_layers > self.num_layers {
            return fail(format!(
                "two_stream_top_layers {} exceeds num_layers {}",
                self.two_stream_top_layers, self.num_layers
            ));
        }
        if self.head_allocation.total() != self.num_heads {
            return fail(format!(
                "allocation sums to {} ≠ {}",
                self.head_allocation.total(),
                self.num_heads
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            ));
        }
        if self.adjacent_window == 0 {
            return fail("adjacent_window must be at least 1".into());
        }
        if self.vocab_size <= NUM_RESERVED {
            return fail(format!(
                "vocab_size {} leaves no room beyond the {NUM_RESERVED} reserved tokens",
                self.vocab_size
            ));
        }
        Ok(())
    }
}
