//! Multi-label character classifier: three-conv feature stack, global
//! average pooling, linear head to C logits. The final conv activations are
//! returned alongside the logits so Grad-CAM can backpropagate into them.

use crate::numeric::init::glorot;
use crate::numeric::{NumericError, ParamId, ParamStore, Rng, Tape, Value};

use super::CharMapConfig;

const H1: usize = 16;

pub struct Classifier {
    /// Number of character classes C.
    pub c: usize,
    /// Final conv channels.
    pub ch: usize,
    /// Final conv map side F (== h/4).
    pub f: usize,
    pub h: usize,
    pub w: usize,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    conv3_w: ParamId,
    conv3_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Logits plus the retrievable final conv activations (pre-pooling).
pub struct ClassifierOut {
    /// [C] logits.
    pub logits: Value,
    /// [Ch, F, F] relu activations feeding the pooling layer.
    pub features: Value,
}

impl Classifier {
    pub fn init(
        store: &mut ParamStore,
        cfg: &CharMapConfig,
        c: usize,
        h: usize,
        w: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(h.is_multiple_of(4) && h == w, "square frames, downsampled by 4");
        let ch = cfg.ch;
        let mut r = rng.fork("charmap-init");
        let conv1_w = store.add("charmap.conv1.w", &[H1, 3, 4, 4], glorot(&mut r, 3 * 16, H1 * 16, H1 * 3 * 16));
        let conv1_b = store.add("charmap.conv1.b", &[H1], vec![0.0; H1]);
        let conv2_w = store.add("charmap.conv2.w", &[ch, H1, 4, 4], glorot(&mut r, H1 * 16, ch * 16, ch * H1 * 16));
        let conv2_b = store.add("charmap.conv2.b", &[ch], vec![0.0; ch]);
        let conv3_w = store.add("charmap.conv3.w", &[ch, ch, 3, 3], glorot(&mut r, ch * 9, ch * 9, ch * ch * 9));
        let conv3_b = store.add("charmap.conv3.b", &[ch], vec![0.0; ch]);
        let head_w = store.add("charmap.head.w", &[c, ch], glorot(&mut r, ch, c, c * ch));
        let head_b = store.add("charmap.head.b", &[c], vec![0.0; c]);
        Classifier {
            c,
            ch,
            f: h / 4,
            h,
            w,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            conv3_w,
            conv3_b,
            head_w,
            head_b,
        }
    }

    pub fn attach(store: &ParamStore, cfg: &CharMapConfig, c: usize, h: usize, w: usize) -> Self {
        let get = |name: &str| store.id(name).unwrap_or_else(|| panic!("missing param {name}"));
        Classifier {
            c,
            ch: cfg.ch,
            f: h / 4,
            h,
            w,
            conv1_w: get("charmap.conv1.w"),
            conv1_b: get("charmap.conv1.b"),
            conv2_w: get("charmap.conv2.w"),
            conv2_b: get("charmap.conv2.b"),
            conv3_w: get("charmap.conv3.w"),
            conv3_b: get("charmap.conv3.b"),
            head_w: get("charmap.head.w"),
            head_b: get("charmap.head.b"),
        }
    }

    /// x [3,H,W] → logits [C] and the final conv map.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Value,
    ) -> Result<ClassifierOut, NumericError> {
        if x.shape() != [3, self.h, self.w] {
            return Err(NumericError::ShapeMismatch {
                op: "charmap.forward",
                details: format!("expected [3, {}, {}], got {:?}", self.h, self.w, x.shape()),
            });
        }
        let conv = |tape: &mut Tape, x: &Value, w, b, s, p| -> Result<Value, NumericError> {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            let y = tape.conv2d(x, &w, s, p)?;
            let y = tape.channel_bias(&y, &b)?;
            tape.relu(&y)
        };
        let h1 = conv(tape, x, self.conv1_w, self.conv1_b, 2, 1)?;
        let h2 = conv(tape, &h1, self.conv2_w, self.conv2_b, 2, 1)?;
        let features = conv(tape, &h2, self.conv3_w, self.conv3_b, 1, 1)?;
        let pooled = tape.global_avg_pool(&features)?;
        let row = tape.reshape(&pooled, &[1, self.ch])?;
        let hw = tape.param(store, self.head_w);
        let hb = tape.param(store, self.head_b);
        let scores = tape.matmul_nt(&row, &hw)?;
        let scores = tape.row_bias(&scores, &hb)?;
        let logits = tape.reshape(&scores, &[self.c])?;
        Ok(ClassifierOut { logits, features })
    }

    /// Mean BCE-with-logits against a multi-hot target.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Value,
        targets: &[f32],
    ) -> Result<Value, NumericError> {
        let out = self.forward(tape, store, x)?;
        tape.bce_with_logits_loss(&out.logits, targets)
    }
}

/// Characters whose sigmoid score exceeds `threshold`, ascending.
pub fn ids_from_logits(logits: &[f32], threshold: f32) -> Vec<usize> {
    logits
        .iter()
        .enumerate()
        .filter(|(_, &l)| sigmoid(l) > threshold)
        .map(|(i, _)| i)
        .collect()
}

fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-x as f64).exp())) as f32
}
