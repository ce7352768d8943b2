//! Deterministic synthetic sprite-story corpus.
//!
//! Eight characters, each a unique (shape, color) pair, act out five-frame
//! stories on procedural backgrounds. Text is template-generated over a
//! closed vocabulary, so every paragraph names exactly the characters placed
//! in its frame, and every frame carries an exact silhouette mask — the
//! ground truth the region-extraction oracles lean on.

mod generate;
mod io;
mod shapes;
pub mod text;

pub use generate::generate_dataset;
pub use io::{
    dataset_hash, load_image, load_manifest, load_sample, load_split, save_image, save_sample,
};
pub use shapes::render_frame;

use serde::{Deserialize, Serialize};

/// Frames per story house the "5 short paragraphs" structure.
pub const FRAMES_PER_STORY: usize = 5;
/// Character roster size.
pub const NUM_CHARACTERS: usize = 8;
/// Procedural background count.
pub const NUM_BACKGROUNDS: usize = 8;
/// Sprite half-extent in pixels at scale 1 (13x13 bounding box).
pub const SPRITE_HALF: i32 = 6;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image file {path}: {detail}")]
    Image { path: String, detail: String },

    #[error("corrupt record {path}: {detail}")]
    Corrupt { path: String, detail: String },

    #[error("placement unsatisfiable for sample {index} after {regenerations} regenerations")]
    Placement { index: usize, regenerations: usize },

    #[error("out-of-bounds placement: character {character_id} at ({cx}, {cy})")]
    OutOfBounds { character_id: usize, cx: i32, cy: i32 },

    #[error("invalid dataset config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
    Diamond,
    Bar,
}

/// One roster entry; `(shape, color)` is a bijection with `character_id`.
#[derive(Debug, Clone, Copy)]
pub struct Sprite {
    pub character_id: usize,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    pub name: &'static str,
}

/// The fixed cast. Colors are saturated and mutually distant so characters
/// stay distinguishable after heavy VQ compression.
pub const ROSTER: [Sprite; NUM_CHARACTERS] = [
    Sprite { character_id: 0, shape: ShapeKind::Circle, color: [230, 60, 50], name: "pip" },
    Sprite { character_id: 1, shape: ShapeKind::Square, color: [240, 200, 40], name: "koko" },
    Sprite { character_id: 2, shape: ShapeKind::Triangle, color: [60, 180, 75], name: "mila" },
    Sprite { character_id: 3, shape: ShapeKind::Cross, color: [55, 110, 230], name: "rex" },
    Sprite { character_id: 4, shape: ShapeKind::Ring, color: [220, 70, 200], name: "suzu" },
    Sprite { character_id: 5, shape: ShapeKind::Star, color: [70, 210, 210], name: "tama" },
    Sprite { character_id: 6, shape: ShapeKind::Diamond, color: [245, 140, 30], name: "nilo" },
    Sprite { character_id: 7, shape: ShapeKind::Bar, color: [245, 245, 245], name: "vega" },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub character_id: usize,
    pub cx: i32,
    pub cy: i32,
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frame_index: usize,
    pub placed: Vec<Placement>,
    pub background_id: usize,
}

/// Row-major RGB8 image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn filled(h: usize, w: usize) -> Self {
        Image { h, w, rgb: vec![0; h * w * 3] }
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// [3, H, W] float view in [0, 1] for the tokenizer/classifier.
    pub fn to_chw(&self) -> Vec<f32> {
        let (h, w) = (self.h, self.w);
        let mut out = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = self.get(x, y);
                for c in 0..3 {
                    out[c * h * w + y * w + x] = p[c] as f32 / 255.0;
                }
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`]: clamp to [0, 1] and quantize to RGB8.
    pub fn from_chw(h: usize, w: usize, chw: &[f32]) -> Self {
        assert_eq!(chw.len(), 3 * h * w, "chw buffer does not match {h}x{w}");
        let mut img = Image::filled(h, w);
        for y in 0..h {
            for x in 0..w {
                let mut p = [0u8; 3];
                for (c, slot) in p.iter_mut().enumerate() {
                    let v = chw[c * h * w + y * w + x].clamp(0.0, 1.0);
                    *slot = (v * 255.0).round() as u8;
                }
                img.put(x, y, p);
            }
        }
        img
    }
}

/// Binary silhouette mask, true where any sprite covers the pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl MaskImage {
    pub fn empty(h: usize, w: usize) -> Self {
        MaskImage { h, w, bits: vec![false; h * w] }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// One story: per-frame paragraphs (token ids), rendered frames, mention
/// vectors, exact masks, and the scene specs they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct StorySample {
    pub story: Vec<Vec<u16>>,
    pub frames: Vec<Image>,
    pub mentions: Vec<Vec<bool>>,
    pub true_masks: Vec<MaskImage>,
    pub scenes: Vec<SceneSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            c: NUM_CHARACTERS,
            n: FRAMES_PER_STORY,
            h: 32,
            w: 32,
            train: 512,
            val: 64,
            test: 64,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.c != NUM_CHARACTERS {
            return Err(DatasetError::Config(format!(
                "c must be {NUM_CHARACTERS} (fixed roster), got {}",
                self.c
            )));
        }
        if self.n != FRAMES_PER_STORY {
            return Err(DatasetError::Config(format!(
                "n must be {FRAMES_PER_STORY}, got {}",
                self.n
            )));
        }
        if self.h < 16 || self.w < 16 {
            return Err(DatasetError::Config(format!(
                "frame size {}x{} too small for sprites",
                self.h, self.w
            )));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(DatasetError::Config("all splits must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPaths {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub vocab: Vec<String>,
    pub counts: SplitCounts,
    pub samples: SplitPaths,
    /// SHA-256 over every sample file, in manifest order.
    pub corpus_hash: String,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.samples.train),
            "val" => Some(&self.samples.val),
            "test" => Some(&self.samples.test),
            _ => None,
        }
    }
}
