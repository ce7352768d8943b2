//! Frame ↔ token-grid conversion on a trained model, plus the JSON
//! sequence format (one file per story: array of per-frame index arrays).

use std::path::Path;

use crate::numeric::{ParamStore, Tape};

use super::model::VqVae;
use super::quantize::quantize_indices;
use super::{TokenGrid, VqVaeError};

/// Each frame is a CHW f32 buffer of length 3·H·W with values in [0,1]
/// (see `dataset::Image::to_chw`).
pub fn tokenize(
    model: &VqVae,
    store: &ParamStore,
    frames: &[Vec<f32>],
) -> Result<Vec<TokenGrid>, VqVaeError> {
    let mut grids = Vec::with_capacity(frames.len());
    let codebook = store.data(model.codebook);
    for frame in frames {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, model.h, model.w], frame.clone());
        let ze = model.encode(&mut tape, store, &x)?;
        let cells = tape.cells_from_chw(&ze)?;
        let indices = quantize_indices(cells.data(), codebook, model.k, model.d);
        grids.push(TokenGrid::new(model.p, indices));
    }
    Ok(grids)
}

/// Inverse direction: codebook lookup per cell, then decode. Returns CHW
/// f32 frames.
pub fn detokenize(
    model: &VqVae,
    store: &ParamStore,
    grids: &[TokenGrid],
) -> Result<Vec<Vec<f32>>, VqVaeError> {
    let codebook = store.data(model.codebook);
    let (p, d) = (model.p, model.d);
    let mut frames = Vec::with_capacity(grids.len());
    for grid in grids {
        assert_eq!(grid.p, p, "grid side does not match model");
        let mut chw = vec![0.0f32; d * p * p];
        for (cell, &idx) in grid.indices.iter().enumerate() {
            let idx = idx as usize;
            if idx >= model.k {
                return Err(VqVaeError::BadToken { index: idx, k: model.k });
            }
            for c in 0..d {
                chw[c * p * p + cell] = codebook[idx * d + c];
            }
        }
        let mut tape = Tape::new();
        let zq = tape.constant(&[d, p, p], chw);
        let out = model.decode(&mut tape, store, &zq)?;
        frames.push(out.data().to_vec());
    }
    Ok(frames)
}

/// One story's token sequence → JSON array of per-frame index arrays.
pub fn save_token_sequences(path: &Path, grids: &[TokenGrid]) -> Result<(), VqVaeError> {
    let rows: Vec<&[u16]> = grids.iter().map(|g| g.flatten()).collect();
    let json = serde_json::to_string(&rows).expect("token grids serialize");
    std::io::Write::write_all(
        &mut std::fs::File::create(path).map_err(|e| io_err(path, e))?,
        json.as_bytes(),
    )
    .map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load_token_sequences(path: &Path, p: usize, k: usize) -> Result<Vec<TokenGrid>, VqVaeError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let rows: Vec<Vec<u16>> = serde_json::from_str(&text).map_err(|e| {
        VqVaeError::Dataset(crate::dataset::DatasetError::Corrupt {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    })?;
    let mut grids = Vec::with_capacity(rows.len());
    for row in rows {
        if row.len() != p * p {
            return Err(VqVaeError::Dataset(crate::dataset::DatasetError::Corrupt {
                path: path.display().to_string(),
                detail: format!("frame holds {} indices, expected {}", row.len(), p * p),
            }));
        }
        if let Some(&bad) = row.iter().find(|&&v| (v as usize) >= k) {
            return Err(VqVaeError::BadToken { index: bad as usize, k });
        }
        grids.push(TokenGrid::new(p, row));
    }
    Ok(grids)
}

fn io_err(path: &Path, e: std::io::Error) -> VqVaeError {
    VqVaeError::Dataset(crate::dataset::DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Rng, Value};
    use crate::vqvae::quantize::quantize_on_tape;
    use crate::vqvae::VqVaeConfig;

    fn setup() -> (ParamStore, VqVae) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(77);
        let model = VqVae::init(&mut store, &VqVaeConfig::default(), 32, 32, &mut rng);
        (store, model)
    }

    fn random_frames(n: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| (0..3 * 32 * 32).map(|_| rng.uniform()).collect()).collect()
    }

    #[test]
    fn five_frames_give_320_indices_all_below_k() {
        let (store, model) = setup();
        let frames = random_frames(5, 11);
        let grids = tokenize(&model, &store, &frames).unwrap();
        assert_eq!(grids.len(), 5);
        let flat: Vec<u16> = grids.iter().flat_map(|g| g.flatten().iter().copied()).collect();
        assert_eq!(flat.len(), 320);
        assert!(flat.iter().all(|&i| (i as usize) < model.k));
    }

    #[test]
    fn detokenize_equals_decode_of_quantized_features_exactly() {
        let (store, model) = setup();
        let frames = random_frames(1, 12);
        let grids = tokenize(&model, &store, &frames).unwrap();
        let via_tokens = detokenize(&model, &store, &grids).unwrap();

        // Reference route: the straight-through forward used in training.
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 32, 32], frames[0].clone());
        let ze = model.encode(&mut tape, &store, &x).unwrap();
        let cells = tape.cells_from_chw(&ze).unwrap();
        let codebook: Value = tape.param(&store, model.codebook);
        let (indices, _, zq) = quantize_on_tape(&mut tape, &cells, &codebook).unwrap();
        assert_eq!(indices, grids[0].indices);
        let zq_chw = tape.chw_from_cells(&zq, 8, 8).unwrap();
        let xhat = model.decode(&mut tape, &store, &zq_chw).unwrap();
        assert_eq!(via_tokens[0], xhat.data(), "the two decode routes must agree bit-for-bit");
    }

    #[test]
    fn detokenize_rejects_out_of_range_index() {
        let (store, model) = setup();
        let mut grid = TokenGrid::new(8, vec![0; 64]);
        grid.indices[10] = model.k as u16;
        let err = detokenize(&model, &store, &[grid]).unwrap_err();
        assert!(matches!(err, VqVaeError::BadToken { index, k } if index == 64 && k == 64));
    }

    #[test]
    fn sequence_file_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.json");
        let grids: Vec<TokenGrid> =
            (0..5).map(|f| TokenGrid::new(8, (0..64).map(|i| ((i + f) % 64) as u16).collect())).collect();
        save_token_sequences(&path, &grids).unwrap();
        let loaded = load_token_sequences(&path, 8, 64).unwrap();
        assert_eq!(loaded, grids);
        // k too small for the stored indices → BadToken.
        let err = load_token_sequences(&path, 8, 32).unwrap_err();
        assert!(matches!(err, VqVaeError::BadToken { .. }));
        // malformed frame length
        std::fs::write(&path, "[[1,2,3]]").unwrap();
        assert!(load_token_sequences(&path, 8, 64).is_err());
    }
}
