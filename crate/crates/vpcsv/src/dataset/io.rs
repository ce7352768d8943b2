//! Sample and manifest persistence: frames and masks as PNG, story and
//! scenes as JSON, everything hashed for regeneration checks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::text;
use super::{
    DatasetError, DatasetManifest, Image, MaskImage, SceneSpec, StorySample, ROSTER,
};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> DatasetError + '_ {
    move |e| DatasetError::Image { path: path.display().to_string(), detail: e.to_string() }
}

/// Write one RGB image as PNG.
pub fn save_image(path: &Path, img: &Image) -> Result<(), DatasetError> {
    let buf = image::RgbImage::from_raw(img.w as u32, img.h as u32, img.rgb.clone())
        .expect("pixel buffer sized to dims");
    buf.save(path).map_err(image_err(path))
}

/// Read an RGB PNG back as an [`Image`].
pub fn load_image(path: &Path) -> Result<Image, DatasetError> {
    let img = image::open(path).map_err(image_err(path))?.into_rgb8();
    Ok(Image { h: img.height() as usize, w: img.width() as usize, rgb: img.into_raw() })
}

#[derive(Serialize, Deserialize)]
struct StoryJson {
    paragraphs: Vec<Vec<u16>>,
    /// Human-readable rendering of each paragraph; derived, never read back.
    text: Vec<String>,
    mentions: Vec<Vec<bool>>,
    scenes: Vec<SceneSpec>,
}

pub fn save_sample(dir: &Path, sample: &StorySample) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, frame) in sample.frames.iter().enumerate() {
        save_image(&dir.join(format!("frame_{i}.png")), frame)?;
    }
    for (i, mask) in sample.true_masks.iter().enumerate() {
        let path = dir.join(format!("mask_{i}.png"));
        let pixels: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let buf = image::GrayImage::from_raw(mask.w as u32, mask.h as u32, pixels)
            .expect("mask buffer sized to dims");
        buf.save(&path).map_err(image_err(&path))?;
    }
    let vocab = text::vocab(&ROSTER);
    let story = StoryJson {
        paragraphs: sample.story.clone(),
        text: sample.story.iter().map(|p| text::detokenize(p, &vocab)).collect(),
        mentions: sample.mentions.clone(),
        scenes: sample.scenes.clone(),
    };
    let path = dir.join("story.json");
    let json = serde_json::to_string_pretty(&story).expect("story serializes");
    std::fs::write(&path, json).map_err(io_err(&path))?;
    Ok(())
}

pub fn load_sample(dir: &Path) -> Result<StorySample, DatasetError> {
    let story_path = dir.join("story.json");
    let raw = std::fs::read_to_string(&story_path).map_err(io_err(&story_path))?;
    let story: StoryJson = serde_json::from_str(&raw).map_err(|e| DatasetError::Corrupt {
        path: story_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let n = story.paragraphs.len();
    if story.mentions.len() != n || story.scenes.len() != n {
        return Err(DatasetError::Corrupt {
            path: story_path.display().to_string(),
            detail: format!(
                "field lengths disagree: {n} paragraphs, {} mentions, {} scenes",
                story.mentions.len(),
                story.scenes.len()
            ),
        });
    }
    let mut frames = Vec::with_capacity(n);
    let mut true_masks = Vec::with_capacity(n);
    for i in 0..n {
        frames.push(load_image(&dir.join(format!("frame_{i}.png")))?);
        let path = dir.join(format!("mask_{i}.png"));
        let img = image::open(&path).map_err(image_err(&path))?.into_luma8();
        true_masks.push(MaskImage {
            h: img.height() as usize,
            w: img.width() as usize,
            bits: img.into_raw().iter().map(|&v| v >= 128).collect(),
        });
    }
    Ok(StorySample {
        story: story.paragraphs,
        frames,
        mentions: story.mentions,
        true_masks,
        scenes: story.scenes,
    })
}

/// Every sample of one split, in manifest order.
pub fn load_split(
    root: &Path,
    manifest: &DatasetManifest,
    split: &str,
) -> Result<Vec<StorySample>, DatasetError> {
    let rels = manifest
        .split(split)
        .ok_or_else(|| DatasetError::Config(format!("unknown split `{split}`")))?;
    rels.iter().map(|rel| load_sample(&root.join(rel))).collect()
}

/// Files belonging to one sample, in hash order.
fn sample_files(n: usize) -> Vec<String> {
    let mut files: Vec<String> = (0..n).map(|i| format!("frame_{i}.png")).collect();
    files.extend((0..n).map(|i| format!("mask_{i}.png")));
    files.push("story.json".to_string());
    files
}

/// SHA-256 over every sample file (path string + bytes) in manifest order.
/// The manifest itself is excluded — it stores this value.
pub fn dataset_hash(root: &Path, manifest: &DatasetManifest) -> Result<String, DatasetError> {
    let mut hasher = Sha256::new();
    for split in ["train", "val", "test"] {
        for rel in manifest.split(split).expect("known split") {
            for file in sample_files(manifest.n) {
                let path = root.join(rel).join(&file);
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                hasher.update(rel.as_bytes());
                hasher.update(b"/");
                hasher.update(file.as_bytes());
                hasher.update((bytes.len() as u64).to_le_bytes());
                hasher.update(&bytes);
            }
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(io_err(&path))
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest, DatasetError> {
    let path = root.join("manifest.json");
    let raw = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&raw).map_err(|e| DatasetError::Corrupt {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    let counts = [
        (manifest.counts.train, manifest.samples.train.len(), "train"),
        (manifest.counts.val, manifest.samples.val.len(), "val"),
        (manifest.counts.test, manifest.samples.test.len(), "test"),
    ];
    for (declared, actual, split) in counts {
        if declared != actual {
            return Err(DatasetError::Corrupt {
                path: path.display().to_string(),
                detail: format!("{split}: declares {declared} samples, lists {actual}"),
            });
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for split in ["train", "val", "test"] {
        for rel in manifest.split(split).expect("known split") {
            if !seen.insert(rel.clone()) {
                return Err(DatasetError::Corrupt {
                    path: path.display().to_string(),
                    detail: format!("sample path `{rel}` appears in two splits"),
                });
            }
        }
    }
    Ok(manifest)
}
