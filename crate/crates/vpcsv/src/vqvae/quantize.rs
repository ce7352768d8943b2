//! Nearest-codebook assignment and its tape plumbing.

use crate::numeric::{NumericError, Tape, Value};

/// Argmin over squared L2 distance per cell; ties go to the smallest index.
/// `cells` is [num_cells, d] row-major, `codebook` is [k, d].
pub fn quantize_indices(cells: &[f32], codebook: &[f32], k: usize, d: usize) -> Vec<u16> {
    assert!(k >= 2, "codebook must hold at least 2 entries");
    assert_eq!(cells.len() % d, 0);
    assert_eq!(codebook.len(), k * d);
    let mut out = Vec::with_capacity(cells.len() / d);
    for cell in cells.chunks_exact(d) {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (j, entry) in codebook.chunks_exact(d).enumerate() {
            let mut dist = 0.0f64;
            for (&c, &e) in cell.iter().zip(entry) {
                let delta = c as f64 - e as f64;
                dist += delta * delta;
            }
            // Strict `<` keeps the smallest index on exact ties.
            if dist < best_dist {
                best_dist = dist;
                best = j;
            }
        }
        out.push(best as u16);
    }
    out
}

/// Quantize `cells` against the codebook value on the tape. Returns the
/// indices, the gathered codebook rows `e` (gradient → codebook), and the
/// straight-through grid z_q (forward `e`, backward → `cells` unchanged).
pub fn quantize_on_tape(
    tape: &mut Tape,
    cells: &Value,
    codebook: &Value,
) -> Result<(Vec<u16>, Value, Value), NumericError> {
    let (k, d) = (codebook.shape()[0], codebook.shape()[1]);
    let indices = quantize_indices(cells.data(), codebook.data(), k, d);
    let rows: Vec<usize> = indices.iter().map(|&i| i as usize).collect();
    let e = tape.embedding(codebook, &rows)?;
    let zq = tape.straight_through(&e, cells)?;
    Ok((indices, e, zq))
}
