//! Visual tokenizer: conv encoder → codebook quantization → transposed-conv
//! decoder, trained with the three-term loss (reconstruction + codebook +
//! β·commitment) and straight-through gradients across the discrete step.

mod model;
mod quantize;
mod tokenize;
mod train;

pub use model::{ForwardTerms, VqVae};
pub use quantize::{quantize_indices, quantize_on_tape};
pub use tokenize::{detokenize, load_token_sequences, save_token_sequences, tokenize};
pub use train::{train_vqvae, VqEpochLog};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum VqVaeError {
    #[error(transparent)]
    Numeric(#[from] crate::numeric::NumericError),

    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),

    #[error("diverged at epoch {epoch} step {step}: {detail}; last-good checkpoint retained")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("token index {index} out of range for codebook of {k}")]
    BadToken { index: usize, k: usize },

    #[error("resume meta {path}: {detail}")]
    ResumeMeta { path: String, detail: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqVaeConfig {
    /// Codebook size K.
    pub k: usize,
    /// Codebook / feature dimension D.
    pub d: usize,
    /// Commitment weight β.
    pub beta: f32,
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        VqVaeConfig { k: 64, d: 32, beta: 0.25, lr: 2e-3, epochs: 6, batch: 8 }
    }
}

/// Row-major p×p grid of codebook indices for one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub p: usize,
    pub indices: Vec<u16>,
}

impl TokenGrid {
    pub fn new(p: usize, indices: Vec<u16>) -> Self {
        assert_eq!(indices.len(), p * p);
        TokenGrid { p, indices }
    }

    /// Row-major flattening: z^{0,0} … z^{0,p−1}, z^{1,0} …
    pub fn flatten(&self) -> &[u16] {
        &self.indices
    }

    pub fn unflatten(p: usize, flat: &[u16]) -> Self {
        TokenGrid::new(p, flat.to_vec())
    }

    pub fn at(&self, row: usize, col: usize) -> u16 {
        self.indices[row * self.p + col]
    }
}
