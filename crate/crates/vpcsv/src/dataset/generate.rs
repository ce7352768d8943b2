//! Story sampling and corpus generation.
//!
//! Placement draws an anchor from a loose 5-point grid plus jitter, then
//! rejection-samples against the ≤25% bbox-overlap rule. A sample that
//! cannot place a sprite within 100 attempts is regenerated under a fresh
//! sub-seed; ten failed regenerations abort. Per-sample sub-seeds hash the
//! global sample index, so splits are disjoint by construction and output
//! is independent of any sharding.

use std::path::Path;

use super::io::{dataset_hash, save_sample, write_manifest};
use super::shapes::{overlap_fraction, render_frame};
use super::text;
use super::{
    DatasetConfig, DatasetError, DatasetManifest, Placement, SceneSpec, SplitCounts, SplitPaths,
    StorySample, NUM_BACKGROUNDS, ROSTER, SPRITE_HALF,
};
use crate::numeric::Rng;

const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const MAX_REGENERATIONS: usize = 10;
/// Per-frame sprite-count weights for 0..=3 characters.
const COUNT_WEIGHTS: [f32; 4] = [0.10, 0.40, 0.30, 0.20];
const JITTER: i32 = 2;

/// Anchor grid scaled to the frame; for 32x32 this is the four loose
/// quadrant centers plus the middle, close enough to interact under jitter.
fn anchors(h: usize, w: usize) -> [(i32, i32); 5] {
    let (h, w) = (h as i32, w as i32);
    let lo_x = SPRITE_HALF + JITTER + 1;
    let lo_y = SPRITE_HALF + JITTER + 1;
    let hi_x = w - 1 - SPRITE_HALF - JITTER - 1;
    let hi_y = h - 1 - SPRITE_HALF - JITTER - 1;
    [
        (lo_x, lo_y),
        (hi_x, lo_y),
        (lo_x, hi_y),
        (hi_x, hi_y),
        (w / 2, h / 2),
    ]
}

fn sample_scene(
    frame_index: usize,
    cfg: &DatasetConfig,
    rng: &mut Rng,
) -> Result<SceneSpec, DatasetError> {
    let count = rng.weighted(&COUNT_WEIGHTS);
    let ids = rng.choose_distinct(cfg.c, count); // already in random order
    let background_id = rng.below(NUM_BACKGROUNDS);
    let grid = anchors(cfg.h, cfg.w);
    let mut placed: Vec<Placement> = Vec::with_capacity(count);
    for &character_id in &ids {
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let (ax, ay) = grid[rng.below(grid.len())];
            let cand = Placement {
                character_id,
                cx: ax + rng.below(2 * JITTER as usize + 1) as i32 - JITTER,
                cy: ay + rng.below(2 * JITTER as usize + 1) as i32 - JITTER,
                scale: 1.0,
            };
            if placed.iter().all(|p| overlap_fraction(p, &cand) <= 0.25) {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            // Signals the caller to regenerate the whole sample.
            return Err(DatasetError::Placement { index: frame_index, regenerations: 0 });
        }
    }
    Ok(SceneSpec { frame_index, placed, background_id })
}

fn sample_story(cfg: &DatasetConfig, rng: &Rng) -> Result<StorySample, DatasetError> {
    let mut scenes = Vec::with_capacity(cfg.n);
    for f in 0..cfg.n {
        let mut frame_rng = rng.fork("scene").fork_index(f as u64);
        scenes.push(sample_scene(f, cfg, &mut frame_rng)?);
    }
    let mut story = Vec::with_capacity(cfg.n);
    let mut frames = Vec::with_capacity(cfg.n);
    let mut mentions = Vec::with_capacity(cfg.n);
    let mut true_masks = Vec::with_capacity(cfg.n);
    for (f, scene) in scenes.iter().enumerate() {
        let mut text_rng = rng.fork("text").fork_index(f as u64);
        let tokens = text::paragraph(scene, &mut text_rng);
        mentions.push(text::mentions_from_tokens(&tokens));
        story.push(tokens);

        let mut pal_rng = rng.fork("palette").fork_index(f as u64);
        let jitter = [0; 3].map(|_| pal_rng.below(13) as i16 - 6);
        let (img, mask) = render_frame(scene, &ROSTER, cfg.h, cfg.w, jitter)?;
        frames.push(img);
        true_masks.push(mask);
    }
    Ok(StorySample { story, frames, mentions, true_masks, scenes })
}

/// One story under the regeneration policy, keyed by absolute sample index.
pub(super) fn story_for_index(
    cfg: &DatasetConfig,
    seed: u64,
    index: usize,
) -> Result<StorySample, DatasetError> {
    let base = Rng::new(seed).fork("dataset").fork_index(index as u64);
    for regen in 0..MAX_REGENERATIONS {
        let rng = base.fork("regen").fork_index(regen as u64);
        match sample_story(cfg, &rng) {
            Ok(sample) => return Ok(sample),
            Err(DatasetError::Placement { .. }) => continue,
            Err(other) => return Err(other),
        }
    }
    Err(DatasetError::Placement { index, regenerations: MAX_REGENERATIONS })
}

/// Generate the full corpus under `root`: per-sample directories, then a
/// manifest carrying the corpus hash. Identical (config, seed) inputs yield
/// byte-identical trees.
pub fn generate_dataset(
    root: &Path,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    cfg.validate()?;
    let splits = [("train", cfg.train), ("val", cfg.val), ("test", cfg.test)];
    let mut paths = SplitPaths { train: vec![], val: vec![], test: vec![] };
    let mut global = 0usize;
    for (split, count) in splits {
        for local in 0..count {
            let sample = story_for_index(cfg, seed, global)?;
            let rel = format!("samples/{split}/{local:05}");
            save_sample(&root.join(&rel), &sample)?;
            match split {
                "train" => paths.train.push(rel),
                "val" => paths.val.push(rel),
                _ => paths.test.push(rel),
            }
            global += 1;
        }
    }
    let mut manifest = DatasetManifest {
        version: 1,
        seed,
        c: cfg.c,
        n: cfg.n,
        h: cfg.h,
        w: cfg.w,
        vocab: text::vocab(&ROSTER),
        counts: SplitCounts { train: cfg.train, val: cfg.val, test: cfg.test },
        samples: paths,
        corpus_hash: String::new(),
    };
    manifest.corpus_hash = dataset_hash(root, &manifest)?;
    write_manifest(root, &manifest)?;
    Ok(manifest)
}
