//! End-to-end character-centric story visualization at desk scale: a dense
//! tensor autodiff core, a deterministic synthetic sprite-story corpus, a
//! VQ-VAE visual tokenizer, character-region token planning, a two-stage
//! autoregressive token LM, and the paper-faithful evaluation suite.

pub mod charmap;
pub mod dataset;
pub mod eval;
pub mod numeric;
pub mod storylm;
pub mod vqvae;
