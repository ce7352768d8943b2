//! Two-stage autoregressive story language model over a unified token
//! vocabulary. Stage 1 plans character visual tokens from the story text;
//! stage 2 completes the full visual token sequence conditioned on the story
//! and the plan. Both stages share one causal transformer. An optional
//! token-level character-alignment term pushes probability toward each
//! character's signature visual tokens.

mod decode;
mod layout;
mod model;
mod stats;
mod train;

pub use decode::{
    generate_baseline, generate_completion, generate_plan, DecodeConfig, DecodeStrategy, Inference,
};
pub use layout::{Segments, Sequence, SequenceLayout};
pub use model::{
    alignment_loss, completion_loss, masked_sequence_loss, plan_loss, sequence_logits,
    stage2_objective, StoryLmModel,
};
pub use stats::{character_token_stats, load_stats, save_stats, union_tokens, CharTokenStats};
pub use train::{
    derived_path, load_lm_data, train_storylm, LmEpochLog, LmTrainData, LmTrainMeta,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StoryLmError {
    #[error(transparent)]
    Numeric(#[from] crate::numeric::NumericError),

    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),

    #[error(transparent)]
    Tokenizer(#[from] crate::vqvae::VqVaeError),

    #[error(transparent)]
    CharMap(#[from] crate::charmap::CharMapError),

    #[error("sequence of {len} tokens exceeds maximum length {max}")]
    TooLong { len: usize, max: usize },

    #[error("text token {token} out of range for text vocabulary of {v_t}")]
    BadText { token: u16, v_t: usize },

    #[error("visual token {token} out of range for codebook of {k}")]
    BadVisual { token: u16, k: usize },

    #[error("{what}: expected {want} frames, got {got}")]
    WrongFrames { what: &'static str, want: usize, got: usize },

    #[error("grid side {got} does not match layout side {want}")]
    WrongSide { got: usize, want: usize },

    #[error("malformed sequence: {0}")]
    Malformed(String),

    #[error("bad decode config: {0}")]
    BadDecodeConfig(String),

    #[error("diverged at epoch {epoch} step {step}: {detail}; last-good checkpoint retained")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("resume meta {path}: {detail}")]
    ResumeMeta { path: String, detail: String },
}

/// Transformer and training hyper-parameters. The `two_stage` and `lambda`
/// switches select the system variant: `(false, 0)` is the one-stage
/// baseline, `(true, 0)` adds visual planning, `(false, >0)` adds token
/// alignment to the baseline, and `(true, >0)` is the full system.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LmConfig {
    /// Model (embedding) dimension.
    pub d: usize,
    /// Number of decoder blocks.
    pub layers: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Feed-forward hidden width.
    pub ff: usize,
    /// Dropout rate applied to embeddings and residual branches.
    pub dropout: f32,
    /// Adam learning rate.
    pub lr: f32,
    /// Training epochs.
    pub epochs: usize,
    /// Stories per mini-batch.
    pub batch: usize,
    /// Weight of the character-alignment loss; 0 disables it.
    pub lambda: f32,
    /// Train the planning stage and condition completion on plans.
    pub two_stage: bool,
    /// Top-k cutoff when ranking each character's signature tokens.
    pub stats_k: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d: 128,
            layers: 2,
            heads: 4,
            ff: 512,
            dropout: 0.1,
            lr: 1e-3,
            epochs: 3,
            batch: 4,
            lambda: 0.1,
            two_stage: true,
            stats_k: 10,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), StoryLmError> {
        let bad = |msg: String| Err(StoryLmError::Malformed(msg));
        if self.d == 0 || self.heads == 0 || self.layers == 0 || self.ff == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide model dim {}", self.heads, self.d));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.lambda < 0.0 {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if self.batch == 0 || self.stats_k == 0 {
            return bad("batch and stats_k must be positive".into());
        }
        Ok(())
    }
}
