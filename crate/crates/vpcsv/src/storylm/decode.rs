//! Autoregressive decoding over a KV cache.
//!
//! The incremental path repeats the training graph's per-row arithmetic
//! operation for operation — same kernels, same summation order, same f32
//! rounding points — so its logits are bit-identical to a full forward pass,
//! a property the tests assert with `to_bits`. Decoding never emits a symbol
//! outside the stage's legal alphabet because selection only ever considers
//! legal ids.

use serde::{Deserialize, Serialize};

use super::model::{StoryLmModel, LN_EPS};
use super::{SequenceLayout, StoryLmError};
use crate::charmap::CharacterPlan;
use crate::numeric::{kernels, ParamStore, Rng};
use crate::vqvae::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    #[serde(rename = "topk")]
    TopK,
    Temperature,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(default = "default_strategy")]
    pub strategy: DecodeStrategy,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_strategy() -> DecodeStrategy {
    DecodeStrategy::Greedy
}
fn default_temperature() -> f32 {
    1.0
}
fn default_k() -> usize {
    10
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: default_strategy(),
            temperature: default_temperature(),
            k: default_k(),
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), StoryLmError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(StoryLmError::BadDecodeConfig(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if self.strategy == DecodeStrategy::TopK && self.k == 0 {
            return Err(StoryLmError::BadDecodeConfig("top-k needs k >= 1".into()));
        }
        Ok(())
    }
}

struct LayerWeights {
    ln1_g: Vec<f32>,
    ln1_b: Vec<f32>,
    wqkv: Vec<f32>,
    bqkv: Vec<f32>,
    wo: Vec<f32>,
    bo: Vec<f32>,
    ln2_g: Vec<f32>,
    ln2_b: Vec<f32>,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

/// Immutable weight snapshot for incremental inference.
pub struct Inference {
    v: usize,
    d: usize,
    heads: usize,
    ff: usize,
    max_len: usize,
    tok: Vec<f32>,
    pos: Vec<f32>,
    layers: Vec<LayerWeights>,
    lnf_g: Vec<f32>,
    lnf_b: Vec<f32>,
    /// Head weights pre-transposed to [d, V]. `matmul_nt` in the graph
    /// transposes into exactly this layout before multiplying, so a plain
    /// `matmul` against it reproduces the graph's head projection.
    head_wt: Vec<f32>,
    head_b: Vec<f32>,
}

/// Per-layer key/value rows ([t, d] flat) accumulated during decoding.
pub struct KvCache {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Mirror of the `layer_norm` op's per-row arithmetic.
fn ln_row(x: &[f32], g: &[f32], b: &[f32], out: &mut [f32]) {
    let cols = x.len();
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
    let var = x
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / cols as f64;
    let istd = 1.0 / (var + LN_EPS as f64).sqrt();
    for c in 0..cols {
        let h = ((x[c] as f64 - mean) * istd) as f32;
        out[c] = h * g[c] + b[c];
    }
}

impl Inference {
    pub fn new(model: &StoryLmModel, store: &ParamStore) -> Self {
        let take = |pid| store.data(pid).to_vec();
        let (v, d) = (model.v, model.d);
        let head_w = store.data(model.head_w);
        let mut head_wt = vec![0.0f32; d * v];
        for o in 0..v {
            for c in 0..d {
                head_wt[c * v + o] = head_w[o * d + c];
            }
        }
        Inference {
            v,
            d,
            heads: model.heads,
            ff: model.ff,
            max_len: model.max_len,
            tok: take(model.tok_emb),
            pos: take(model.pos_emb),
            layers: model
                .blocks
                .iter()
                .map(|b| LayerWeights {
                    ln1_g: take(b.ln1_g),
                    ln1_b: take(b.ln1_b),
                    wqkv: take(b.wqkv),
                    bqkv: take(b.bqkv),
                    wo: take(b.wo),
                    bo: take(b.bo),
                    ln2_g: take(b.ln2_g),
                    ln2_b: take(b.ln2_b),
                    w1: take(b.w1),
                    b1: take(b.b1),
                    w2: take(b.w2),
                    b2: take(b.b2),
                })
                .collect(),
            lnf_g: take(model.lnf_g),
            lnf_b: take(model.lnf_b),
            head_wt,
            head_b: take(model.head_b),
        }
    }

    pub fn start(&self) -> KvCache {
        KvCache {
            k: vec![Vec::new(); self.layers.len()],
            v: vec![Vec::new(); self.layers.len()],
            len: 0,
        }
    }

    /// Feed one token and return the next-token logits `[V]`.
    ///
    /// Every arithmetic step below mirrors one graph op on the row this
    /// position occupies: `layer_norm`, `matmul`+`row_bias`, the scaled
    /// masked attention (the mask adds literal `0.0` on visible lanes),
    /// `softmax`, the attention-weighted value sum, residual `add`s, `relu`,
    /// and the pre-transposed head `matmul_nt`.
    pub fn step(&self, cache: &mut KvCache, id: usize) -> Result<Vec<f32>, StoryLmError> {
        let (d, ff, heads) = (self.d, self.ff, self.heads);
        let dh = d / heads;
        let t = cache.len;
        if t >= self.max_len {
            return Err(StoryLmError::TooLong { len: t + 1, max: self.max_len });
        }
        if id >= self.v {
            return Err(StoryLmError::Malformed(format!(
                "id {id} out of range for vocabulary of {}",
                self.v
            )));
        }

        let mut x: Vec<f32> = (0..d)
            .map(|c| self.tok[id * d + c] + self.pos[t * d + c])
            .collect();

        let rows = t + 1;
        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        let mut h = vec![0.0f32; d];
        let mut qkv = vec![0.0f32; 3 * d];
        let mut cat = vec![0.0f32; d];
        let mut proj = vec![0.0f32; d];
        let mut kh = vec![0.0f32; rows * dh];
        let mut vh = vec![0.0f32; rows * dh];
        let mut scores = vec![0.0f32; rows];
        let mut weights = vec![0.0f32; rows];
        let mut av = vec![0.0f32; dh];
        let mut a1 = vec![0.0f32; ff];
        let mut a2 = vec![0.0f32; d];

        for (li, lw) in self.layers.iter().enumerate() {
            ln_row(&x, &lw.ln1_g, &lw.ln1_b, &mut h);
            kernels::matmul(&h, &lw.wqkv, 1, d, 3 * d, &mut qkv);
            for (o, &b) in qkv.iter_mut().zip(&lw.bqkv) {
                *o += b;
            }
            cache.k[li].extend_from_slice(&qkv[d..2 * d]);
            cache.v[li].extend_from_slice(&qkv[2 * d..3 * d]);
            let kc = &cache.k[li];
            let vc = &cache.v[li];

            for head in 0..heads {
                let o0 = head * dh;
                for j in 0..rows {
                    kh[j * dh..(j + 1) * dh].copy_from_slice(&kc[j * d + o0..j * d + o0 + dh]);
                    vh[j * dh..(j + 1) * dh].copy_from_slice(&vc[j * d + o0..j * d + o0 + dh]);
                }
                kernels::matmul_nt(&qkv[o0..o0 + dh], &kh, 1, dh, rows, &mut scores);
                for s in scores.iter_mut() {
                    *s = *s * inv_sqrt + 0.0;
                }
                kernels::softmax_rows(&scores, 1, rows, &mut weights);
                kernels::matmul(&weights, &vh, 1, rows, dh, &mut av);
                cat[o0..o0 + dh].copy_from_slice(&av);
            }
            kernels::matmul(&cat, &lw.wo, 1, d, d, &mut proj);
            for c in 0..d {
                let p = proj[c] + lw.bo[c];
                x[c] += p;
            }

            ln_row(&x, &lw.ln2_g, &lw.ln2_b, &mut h);
            kernels::matmul(&h, &lw.w1, 1, d, ff, &mut a1);
            for (o, &b) in a1.iter_mut().zip(&lw.b1) {
                *o += b;
            }
            for o in a1.iter_mut() {
                *o = o.max(0.0);
            }
            kernels::matmul(&a1, &lw.w2, 1, ff, d, &mut a2);
            for c in 0..d {
                let p = a2[c] + lw.b2[c];
                x[c] += p;
            }
        }

        ln_row(&x, &self.lnf_g, &self.lnf_b, &mut h);
        let mut logits = vec![0.0f32; self.v];
        kernels::matmul(&h, &self.head_wt, 1, d, self.v, &mut logits);
        for (o, &b) in logits.iter_mut().zip(&self.head_b) {
            *o += b;
        }
        cache.len += 1;
        Ok(logits)
    }

    /// Feed a whole prompt; returns the logits after its last token.
    pub fn prefill(&self, cache: &mut KvCache, ids: &[usize]) -> Result<Vec<f32>, StoryLmError> {
        let mut last = None;
        for &id in ids {
            last = Some(self.step(cache, id)?);
        }
        last.ok_or_else(|| StoryLmError::Malformed("empty prompt".into()))
    }
}

fn argmax_legal(logits: &[f32], legal: &[usize]) -> usize {
    let mut best = legal[0];
    for &id in &legal[1..] {
        if logits[id] > logits[best] {
            best = id;
        }
    }
    best
}

/// Max-subtracted softmax sample over `ids` at the given temperature.
fn sample_softmax(logits: &[f32], ids: &[usize], temperature: f32, rng: &mut Rng) -> usize {
    let t = temperature as f64;
    let max = ids
        .iter()
        .map(|&i| logits[i] as f64 / t)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = ids
        .iter()
        .map(|&i| (logits[i] as f64 / t - max).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.uniform() as f64 * total;
    let mut cum = 0.0f64;
    for (&w, &id) in weights.iter().zip(ids) {
        cum += w;
        if u < cum {
            return id;
        }
    }
    *ids.last().expect("legal alphabet is never empty")
}

/// Pick the next symbol from the legal alphabet only.
fn select(logits: &[f32], legal: &[usize], cfg: &DecodeConfig, rng: &mut Rng) -> usize {
    match cfg.strategy {
        DecodeStrategy::Greedy => argmax_legal(logits, legal),
        DecodeStrategy::TopK => {
            let mut ranked = legal.to_vec();
            ranked.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            ranked.truncate(cfg.k.min(ranked.len()));
            sample_softmax(logits, &ranked, 1.0, rng)
        }
        DecodeStrategy::Temperature => {
            if cfg.temperature == 0.0 {
                argmax_legal(logits, legal)
            } else {
                sample_softmax(logits, legal, cfg.temperature, rng)
            }
        }
    }
}

/// Decode exactly `count` symbols after `prompt`, each drawn from `legal`.
fn decode_symbols(
    inf: &Inference,
    prompt: &[usize],
    legal: &[usize],
    count: usize,
    cfg: &DecodeConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>, StoryLmError> {
    let mut cache = inf.start();
    let mut logits = inf.prefill(&mut cache, prompt)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = select(&logits, legal, cfg, rng);
        out.push(id);
        logits = inf.step(&mut cache, id)?;
    }
    Ok(out)
}

/// Stage 1: decode a visual plan for `story` — `n` grids of p*p slots over
/// the visual alphabet plus MASK (a MASK slot means "unplanned").
pub fn generate_plan(
    inf: &Inference,
    layout: &SequenceLayout,
    story: &[Vec<u16>],
    cfg: &DecodeConfig,
) -> Result<Vec<CharacterPlan>, StoryLmError> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).fork("plan");
    let prompt = layout.prompt_stage1(story)?;
    let mut legal: Vec<usize> = (layout.v_t..layout.v_t + layout.k).collect();
    legal.push(layout.mask_id());
    let syms = decode_symbols(inf, &prompt, &legal, layout.plan_len(), cfg, &mut rng)?;
    let pp = layout.p * layout.p;
    Ok(syms
        .chunks(pp)
        .map(|chunk| {
            let slots = chunk
                .iter()
                .map(|&s| {
                    if s == layout.mask_id() {
                        None
                    } else {
                        Some((s - layout.v_t) as u16)
                    }
                })
                .collect();
            CharacterPlan::new(layout.p, slots)
        })
        .collect())
}

/// Stage 2: decode the full visual-token frames for `story`, teacher-forcing
/// the given plan into the prompt. An empty `plans` slice is the one-stage
/// baseline (no plan segment at all).
pub fn generate_completion(
    inf: &Inference,
    layout: &SequenceLayout,
    story: &[Vec<u16>],
    plans: &[CharacterPlan],
    cfg: &DecodeConfig,
) -> Result<Vec<TokenGrid>, StoryLmError> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).fork("completion");
    let prompt = layout.prompt_stage2(story, plans)?;
    let legal: Vec<usize> = (layout.v_t..layout.v_t + layout.k).collect();
    let syms = decode_symbols(inf, &prompt, &legal, layout.plan_len(), cfg, &mut rng)?;
    let pp = layout.p * layout.p;
    Ok(syms
        .chunks(pp)
        .map(|chunk| {
            TokenGrid::new(layout.p, chunk.iter().map(|&s| (s - layout.v_t) as u16).collect())
        })
        .collect())
}

/// One-stage baseline decode: visual frames straight from the story.
pub fn generate_baseline(
    inf: &Inference,
    layout: &SequenceLayout,
    story: &[Vec<u16>],
    cfg: &DecodeConfig,
) -> Result<Vec<TokenGrid>, StoryLmError> {
    generate_completion(inf, layout, story, &[], cfg)
}
