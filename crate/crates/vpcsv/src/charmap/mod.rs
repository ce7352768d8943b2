//! Character mapping: a multi-label character classifier, Grad-CAM region
//! extraction, and the max-merge/γ-threshold rule that turns token grids
//! into character-region plans.

mod gradcam;
mod model;
mod plan;
mod train;

pub use gradcam::{gradcam, merge_heatmaps};
pub use model::{ids_from_logits, Classifier};
pub use plan::{
    load_plans, make_plan, plan_for_frame, save_plans, token_mask, CharacterPlan, RegionMask,
};
pub use train::{train_classifier, ClassPr, ClsEpochLog};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CharMapError {
    #[error(transparent)]
    Numeric(#[from] crate::numeric::NumericError),

    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),

    #[error("unknown character id {id} (model covers {c})")]
    UnknownCharacter { id: usize, c: usize },

    #[error("gamma {0} outside [0, 1]")]
    BadGamma(f32),

    #[error("merge of zero heatmaps")]
    EmptyMerge,

    #[error("heatmap side {side} incompatible with target {target}")]
    BadResolution { side: usize, target: usize },

    #[error("classifier diverged at epoch {epoch} step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharMapConfig {
    /// Channel width of the final conv map (Grad-CAM target).
    pub ch: usize,
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    /// Sigmoid threshold for predicted character sets.
    pub threshold: f32,
    /// Region threshold γ applied to the merged, max-normalized heatmap.
    pub gamma: f32,
}

impl Default for CharMapConfig {
    fn default() -> Self {
        // 64 final-conv channels: the pooled penultimate activations double
        // as the 64-dim feature space for the Fréchet distance metric.
        CharMapConfig { ch: 64, lr: 1e-3, epochs: 8, batch: 16, threshold: 0.5, gamma: 0.5 }
    }
}

/// Square activation map with values in [0, 1]; after max-normalization the
/// peak is exactly 1 unless the raw map was identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub side: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn new(side: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), side * side);
        debug_assert!(values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        Heatmap { side, values }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.side + col]
    }

    /// Nearest-neighbor upsample to `target` per side (pixel resolution).
    pub fn upsample_to(&self, target: usize) -> Result<Heatmap, CharMapError> {
        if !target.is_multiple_of(self.side) {
            return Err(CharMapError::BadResolution { side: self.side, target });
        }
        let f = target / self.side;
        let mut out = vec![0.0f32; target * target];
        for y in 0..target {
            for x in 0..target {
                out[y * target + x] = self.at(y / f, x / f);
            }
        }
        Ok(Heatmap::new(target, out))
    }

    /// Mean-pool down to `target` per side (token resolution); each token
    /// cell averages its (side/target)² patch.
    pub fn pool_to(&self, target: usize) -> Result<Heatmap, CharMapError> {
        if !self.side.is_multiple_of(target) {
            return Err(CharMapError::BadResolution { side: self.side, target });
        }
        let f = self.side / target;
        let inv = 1.0 / (f * f) as f64;
        let mut out = vec![0.0f32; target * target];
        for ty in 0..target {
            for tx in 0..target {
                let mut acc = 0.0f64;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += self.at(ty * f + dy, tx * f + dx) as f64;
                    }
                }
                out[ty * target + tx] = (acc * inv) as f32;
            }
        }
        Ok(Heatmap::new(target, out))
    }
}
