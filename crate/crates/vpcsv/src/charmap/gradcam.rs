//! Grad-CAM heatmaps over the classifier's final conv map, and the
//! elementwise-max merge across characters.

use crate::numeric::{ParamStore, Tape};

use super::model::Classifier;
use super::{CharMapError, Heatmap};

/// Class-specific heatmap at feature resolution F×F: channel weights are the
/// spatial averages of ∂logit_c/∂A, the raw map is relu(Σ_ch w_ch·A_ch), and
/// the result is max-normalized (an identically-zero raw map stays zero).
pub fn gradcam(
    model: &Classifier,
    store: &ParamStore,
    image_chw: &[f32],
    character_id: usize,
) -> Result<Heatmap, CharMapError> {
    if character_id >= model.c {
        return Err(CharMapError::UnknownCharacter { id: character_id, c: model.c });
    }
    let mut tape = Tape::new();
    let x = tape.constant(&[3, model.h, model.w], image_chw.to_vec());
    let out = model.forward(&mut tape, store, &x)?;
    let logit = tape.pick(&out.logits, character_id)?;
    let grads = tape.backward(&logit)?;
    let da = grads
        .of(&out.features)
        .expect("features influence the picked logit");

    let (ch, f) = (model.ch, model.f);
    let cells = f * f;
    let a = out.features.data();
    let mut raw = vec![0.0f64; cells];
    for c in 0..ch {
        let plane = &da[c * cells..(c + 1) * cells];
        let w_c = plane.iter().map(|&g| g as f64).sum::<f64>() / cells as f64;
        for (r, &v) in raw.iter_mut().zip(&a[c * cells..(c + 1) * cells]) {
            *r += w_c * v as f64;
        }
    }
    let mut values: Vec<f32> = raw.iter().map(|&v| v.max(0.0) as f32).collect();
    let peak = values.iter().copied().fold(0.0f32, f32::max);
    if peak > 0.0 {
        for v in values.iter_mut() {
            *v /= peak;
        }
    }
    Ok(Heatmap::new(f, values))
}

/// Elementwise maximum across per-character heatmaps.
pub fn merge_heatmaps(maps: &[Heatmap]) -> Result<Heatmap, CharMapError> {
    let first = maps.first().ok_or(CharMapError::EmptyMerge)?;
    let mut out = first.values.clone();
    for m in &maps[1..] {
        assert_eq!(m.side, first.side, "heatmap shapes must agree");
        for (o, &v) in out.iter_mut().zip(&m.values) {
            *o = o.max(v);
        }
    }
    Ok(Heatmap::new(first.side, out))
}
