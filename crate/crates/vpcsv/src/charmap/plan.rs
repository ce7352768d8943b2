//! γ-thresholding of merged heatmaps into region masks, and the
//! character-token plans they induce over token grids.

use std::path::Path;

use crate::numeric::ParamStore;
use crate::vqvae::TokenGrid;

use super::gradcam::{gradcam, merge_heatmaps};
use super::model::Classifier;
use super::{CharMapError, Heatmap};

/// Boolean keep-mask at token resolution (true = character region).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub p: usize,
    pub keep: Vec<bool>,
}

impl RegionMask {
    pub fn new(p: usize, keep: Vec<bool>) -> Self {
        assert_eq!(keep.len(), p * p);
        RegionMask { p, keep }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Per-cell codebook index, or None for the reserved MASK symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharacterPlan {
    pub p: usize,
    pub slots: Vec<Option<u16>>,
}

impl CharacterPlan {
    pub fn new(p: usize, slots: Vec<Option<u16>>) -> Self {
        assert_eq!(slots.len(), p * p);
        CharacterPlan { p, slots }
    }

    pub fn all_mask(p: usize) -> Self {
        CharacterPlan { p, slots: vec![None; p * p] }
    }

    pub fn mask_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }
}

/// keep[j,k] = (a[j,k] ≥ γ) on a heatmap already at token resolution.
pub fn token_mask(merged: &Heatmap, gamma: f32) -> Result<RegionMask, CharMapError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(CharMapError::BadGamma(gamma));
    }
    Ok(RegionMask::new(merged.side, merged.values.iter().map(|&v| v >= gamma).collect()))
}

/// Kept cells copy the grid's indices; dropped cells become MASK.
pub fn make_plan(grid: &TokenGrid, mask: &RegionMask) -> CharacterPlan {
    assert_eq!(grid.p, mask.p, "grid and mask shapes must agree");
    let slots = grid
        .indices
        .iter()
        .zip(&mask.keep)
        .map(|(&idx, &keep)| keep.then_some(idx))
        .collect();
    CharacterPlan::new(grid.p, slots)
}

/// Full per-frame pipeline: heatmaps for every mentioned character (from the
/// mention labels, not classifier predictions), max-merged, pooled to token
/// resolution, γ-thresholded, and applied to the frame's token grid. Frames
/// without mentions yield the all-MASK plan.
pub fn plan_for_frame(
    model: &Classifier,
    store: &ParamStore,
    image_chw: &[f32],
    mentioned: &[usize],
    grid: &TokenGrid,
    gamma: f32,
) -> Result<CharacterPlan, CharMapError> {
    if mentioned.is_empty() {
        return Ok(CharacterPlan::all_mask(grid.p));
    }
    let maps = mentioned
        .iter()
        .map(|&c| gradcam(model, store, image_chw, c))
        .collect::<Result<Vec<_>, _>>()?;
    let merged = merge_heatmaps(&maps)?;
    let pooled = merged.pool_to(grid.p)?;
    let mask = token_mask(&pooled, gamma)?;
    Ok(make_plan(grid, &mask))
}

/// One story's plans → JSON array of per-frame arrays with MASK as −1.
pub fn save_plans(path: &Path, plans: &[CharacterPlan]) -> Result<(), CharMapError> {
    let rows: Vec<Vec<i32>> = plans
        .iter()
        .map(|p| p.slots.iter().map(|s| s.map_or(-1, |v| v as i32)).collect())
        .collect();
    let json = serde_json::to_string(&rows).expect("plans serialize");
    std::fs::write(path, json).map_err(|e| {
        CharMapError::Dataset(crate::dataset::DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}

pub fn load_plans(path: &Path, p: usize, k: usize) -> Result<Vec<CharacterPlan>, CharMapError> {
    let corrupt = |detail: String| {
        CharMapError::Dataset(crate::dataset::DatasetError::Corrupt {
            path: path.display().to_string(),
            detail,
        })
    };
    let raw = std::fs::read_to_string(path).map_err(|e| {
        CharMapError::Dataset(crate::dataset::DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })
    })?;
    let rows: Vec<Vec<i32>> = serde_json::from_str(&raw).map_err(|e| corrupt(e.to_string()))?;
    rows.into_iter()
        .map(|row| {
            if row.len() != p * p {
                return Err(corrupt(format!("plan holds {} slots, expected {}", row.len(), p * p)));
            }
            let slots = row
                .into_iter()
                .map(|v| match v {
                    -1 => Ok(None),
                    v if v >= 0 && (v as usize) < k => Ok(Some(v as u16)),
                    v => Err(corrupt(format!("slot value {v} outside -1..{k}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(CharacterPlan::new(p, slots))
        })
        .collect()
}
