//! The shared-parameter causal transformer and the stage losses.
//!
//! Pre-norm GPT-style blocks: `x += attn(ln(x)); x += ff(ln(x))`, a final
//! layer norm, and a projection onto the unified vocabulary. Causality comes
//! from an additive mask of −1e9 above the diagonal: after the max-subtracted
//! softmax those lanes underflow to exactly 0.0, so logits at position j are
//! bit-for-bit independent of tokens at positions > j.

use super::{LmConfig, Sequence, SequenceLayout, StoryLmError};
use crate::numeric::{init, ParamId, ParamStore, Rng, Tape, Value};

pub(crate) const LN_EPS: f32 = 1e-5;
pub(crate) const MASK_NEG: f32 = -1e9;
const PROB_FLOOR: f32 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wqkv: ParamId,
    pub bqkv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct StoryLmModel {
    pub v: usize,
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub dropout: f32,
    pub(crate) tok_emb: ParamId,
    pub(crate) pos_emb: ParamId,
    pub(crate) blocks: Vec<BlockParams>,
    pub(crate) lnf_g: ParamId,
    pub(crate) lnf_b: ParamId,
    pub(crate) head_w: ParamId,
    pub(crate) head_b: ParamId,
}

impl StoryLmModel {
    /// Register freshly initialized parameters in `store`.
    pub fn init(
        store: &mut ParamStore,
        layout: &SequenceLayout,
        cfg: &LmConfig,
        rng: &mut Rng,
    ) -> Result<Self, StoryLmError> {
        cfg.validate()?;
        let mut rng = rng.fork("storylm-init");
        let (v, d, ff) = (layout.vocab_size(), cfg.d, cfg.ff);
        let max_len = layout.max_len();

        let tok_emb = store.add("lm.tok_emb", &[v, d], init::embedding(&mut rng, v * d));
        let pos_emb =
            store.add("lm.pos_emb", &[max_len, d], init::embedding(&mut rng, max_len * d));
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = |part: &str| format!("lm.b{i}.{part}");
            blocks.push(BlockParams {
                ln1_g: store.add(&name("ln1.g"), &[d], vec![1.0; d]),
                ln1_b: store.add(&name("ln1.b"), &[d], vec![0.0; d]),
                wqkv: store.add(&name("attn.wqkv"), &[d, 3 * d], init::glorot(&mut rng, d, 3 * d, d * 3 * d)),
                bqkv: store.add(&name("attn.bqkv"), &[3 * d], vec![0.0; 3 * d]),
                wo: store.add(&name("attn.wo"), &[d, d], init::glorot(&mut rng, d, d, d * d)),
                bo: store.add(&name("attn.bo"), &[d], vec![0.0; d]),
                ln2_g: store.add(&name("ln2.g"), &[d], vec![1.0; d]),
                ln2_b: store.add(&name("ln2.b"), &[d], vec![0.0; d]),
                w1: store.add(&name("ff.w1"), &[d, ff], init::glorot(&mut rng, d, ff, d * ff)),
                b1: store.add(&name("ff.b1"), &[ff], vec![0.0; ff]),
                w2: store.add(&name("ff.w2"), &[ff, d], init::glorot(&mut rng, ff, d, ff * d)),
                b2: store.add(&name("ff.b2"), &[d], vec![0.0; d]),
            });
        }
        let lnf_g = store.add("lm.final.g", &[d], vec![1.0; d]);
        let lnf_b = store.add("lm.final.b", &[d], vec![0.0; d]);
        let head_w = store.add("lm.head.w", &[v, d], init::glorot(&mut rng, d, v, v * d));
        let head_b = store.add("lm.head.b", &[v], vec![0.0; v]);

        Ok(StoryLmModel {
            v,
            d,
            heads: cfg.heads,
            ff,
            max_len,
            dropout: cfg.dropout,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        })
    }

    /// Rebind to parameters already present in `store` (after checkpoint load).
    pub fn attach(
        store: &ParamStore,
        layout: &SequenceLayout,
        cfg: &LmConfig,
    ) -> Result<Self, StoryLmError> {
        cfg.validate()?;
        let missing = |name: &str| StoryLmError::Malformed(format!("missing parameter {name}"));
        let get = |name: &str| store.id(name).ok_or_else(|| missing(name));
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = |part: &str| format!("lm.b{i}.{part}");
            blocks.push(BlockParams {
                ln1_g: get(&name("ln1.g"))?,
                ln1_b: get(&name("ln1.b"))?,
                wqkv: get(&name("attn.wqkv"))?,
                bqkv: get(&name("attn.bqkv"))?,
                wo: get(&name("attn.wo"))?,
                bo: get(&name("attn.bo"))?,
                ln2_g: get(&name("ln2.g"))?,
                ln2_b: get(&name("ln2.b"))?,
                w1: get(&name("ff.w1"))?,
                b1: get(&name("ff.b1"))?,
                w2: get(&name("ff.w2"))?,
                b2: get(&name("ff.b2"))?,
            });
        }
        Ok(StoryLmModel {
            v: layout.vocab_size(),
            d: cfg.d,
            heads: cfg.heads,
            ff: cfg.ff,
            max_len: layout.max_len(),
            dropout: cfg.dropout,
            tok_emb: get("lm.tok_emb")?,
            pos_emb: get("lm.pos_emb")?,
            blocks,
            lnf_g: get("lm.final.g")?,
            lnf_b: get("lm.final.b")?,
            head_w: get("lm.head.w")?,
            head_b: get("lm.head.b")?,
        })
    }
}

fn causal_mask(tape: &mut Tape, l: usize) -> Value {
    let mut data = vec![0.0f32; l * l];
    for i in 0..l {
        for j in i + 1..l {
            data[i * l + j] = MASK_NEG;
        }
    }
    tape.constant(&[l, l], data)
}

fn maybe_dropout(
    tape: &mut Tape,
    x: Value,
    rate: f32,
    drop_rng: &mut Option<&mut Rng>,
) -> Value {
    match drop_rng.as_deref_mut() {
        Some(rng) if rate > 0.0 => tape.dropout(&x, rate, rng),
        _ => x,
    }
}

fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    blk: &BlockParams,
    h: &Value,
    mask: &Value,
    heads: usize,
) -> Result<Value, StoryLmError> {
    let d = h.shape()[1];
    let dh = d / heads;
    let wqkv = tape.param(store, blk.wqkv);
    let bqkv = tape.param(store, blk.bqkv);
    let qkv = tape.matmul(h, &wqkv)?;
    let qkv = tape.row_bias(&qkv, &bqkv)?;
    let q = tape.slice_last(&qkv, 0, d)?;
    let k = tape.slice_last(&qkv, d, d)?;
    let v = tape.slice_last(&qkv, 2 * d, d)?;
    let inv_sqrt = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_last(&q, head * dh, dh)?;
        let kh = tape.slice_last(&k, head * dh, dh)?;
        let vh = tape.slice_last(&v, head * dh, dh)?;
        let scores = tape.matmul_nt(&qh, &kh)?;
        let scores = tape.scale(&scores, inv_sqrt)?;
        let scores = tape.add(&scores, mask)?;
        let attn = tape.softmax_last(&scores)?;
        outs.push(tape.matmul(&attn, &vh)?);
    }
    let refs: Vec<&Value> = outs.iter().collect();
    let cat = tape.concat_last(&refs)?;
    let wo = tape.param(store, blk.wo);
    let bo = tape.param(store, blk.bo);
    let proj = tape.matmul(&cat, &wo)?;
    Ok(tape.row_bias(&proj, &bo)?)
}

fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    blk: &BlockParams,
    x: Value,
    mask: &Value,
    heads: usize,
    rate: f32,
    drop_rng: &mut Option<&mut Rng>,
) -> Result<Value, StoryLmError> {
    let g1 = tape.param(store, blk.ln1_g);
    let b1 = tape.param(store, blk.ln1_b);
    let h = tape.layer_norm(&x, &g1, &b1, LN_EPS)?;
    let attn = attention(tape, store, blk, &h, mask, heads)?;
    let attn = maybe_dropout(tape, attn, rate, drop_rng);
    let x = tape.add(&x, &attn)?;

    let g2 = tape.param(store, blk.ln2_g);
    let b2 = tape.param(store, blk.ln2_b);
    let h = tape.layer_norm(&x, &g2, &b2, LN_EPS)?;
    let w1 = tape.param(store, blk.w1);
    let b1f = tape.param(store, blk.b1);
    let ff = tape.matmul(&h, &w1)?;
    let ff = tape.row_bias(&ff, &b1f)?;
    let ff = tape.relu(&ff)?;
    let w2 = tape.param(store, blk.w2);
    let b2f = tape.param(store, blk.b2);
    let ff = tape.matmul(&ff, &w2)?;
    let ff = tape.row_bias(&ff, &b2f)?;
    let ff = maybe_dropout(tape, ff, rate, drop_rng);
    Ok(tape.add(&x, &ff)?)
}

/// Logits `[len, V]` over every position of `ids`. Dropout fires only when
/// `tape` is in training mode and a dropout RNG is supplied.
pub fn sequence_logits(
    tape: &mut Tape,
    model: &StoryLmModel,
    store: &ParamStore,
    ids: &[usize],
    drop_rng: Option<&mut Rng>,
) -> Result<Value, StoryLmError> {
    let l = ids.len();
    if l == 0 {
        return Err(StoryLmError::Malformed("empty sequence".into()));
    }
    if l > model.max_len {
        return Err(StoryLmError::TooLong { len: l, max: model.max_len });
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= model.v) {
        return Err(StoryLmError::Malformed(format!(
            "id {bad} out of range for vocabulary of {}",
            model.v
        )));
    }
    let mut drop_rng = drop_rng;

    let tok = tape.param(store, model.tok_emb);
    let pos = tape.param(store, model.pos_emb);
    let te = tape.embedding(&tok, ids)?;
    let positions: Vec<usize> = (0..l).collect();
    let pe = tape.embedding(&pos, &positions)?;
    let mut x = tape.add(&te, &pe)?;
    x = maybe_dropout(tape, x, model.dropout, &mut drop_rng);

    let mask = causal_mask(tape, l);
    for blk in &model.blocks {
        x = block_forward(tape, store, blk, x, &mask, model.heads, model.dropout, &mut drop_rng)?;
    }
    let g = tape.param(store, model.lnf_g);
    let b = tape.param(store, model.lnf_b);
    let h = tape.layer_norm(&x, &g, &b, LN_EPS)?;
    let hw = tape.param(store, model.head_w);
    let hb = tape.param(store, model.head_b);
    let logits = tape.matmul_nt(&h, &hw)?;
    Ok(tape.row_bias(&logits, &hb)?)
}

/// Mean teacher-forced cross-entropy over the sequence's loss span.
pub fn masked_sequence_loss(
    tape: &mut Tape,
    logits: &Value,
    seq: &Sequence,
) -> Result<Value, StoryLmError> {
    Ok(tape.cross_entropy_masked(logits, seq.targets(), &seq.loss_mask())?)
}

/// Stage-1 objective: cross-entropy over the plan segment (MASK is a
/// predictable symbol, not ignored).
pub fn plan_loss(
    tape: &mut Tape,
    model: &StoryLmModel,
    store: &ParamStore,
    layout: &SequenceLayout,
    story: &[Vec<u16>],
    plans: &[crate::charmap::CharacterPlan],
    drop_rng: Option<&mut Rng>,
) -> Result<Value, StoryLmError> {
    let seq = layout.stage1(story, plans)?;
    let logits = sequence_logits(tape, model, store, seq.inputs(), drop_rng)?;
    masked_sequence_loss(tape, &logits, &seq)
}

/// Stage-2 objective: cross-entropy over the visual-token segment, with the
/// plan segment teacher-forced (empty `plans` = one-stage baseline).
pub fn completion_loss(
    tape: &mut Tape,
    model: &StoryLmModel,
    store: &ParamStore,
    layout: &SequenceLayout,
    story: &[Vec<u16>],
    plans: &[crate::charmap::CharacterPlan],
    grids: &[crate::vqvae::TokenGrid],
    drop_rng: Option<&mut Rng>,
) -> Result<Value, StoryLmError> {
    let seq = layout.stage2(story, plans, grids)?;
    let logits = sequence_logits(tape, model, store, seq.inputs(), drop_rng)?;
    masked_sequence_loss(tape, &logits, &seq)
}

/// L^s over per-position probabilities of the gold targets:
/// −[Σ_{j: z_j ∈ T} log p_j + Σ_{j: z_j ∉ T} log(1 − p_j)], expressed here by
/// the membership flags `in_t[j]`.
pub fn alignment_loss(
    tape: &mut Tape,
    probs: &Value,
    in_t: &[bool],
) -> Result<Value, StoryLmError> {
    if probs.shape().len() != 1 || probs.shape()[0] != in_t.len() {
        return Err(StoryLmError::Malformed(format!(
            "probs {:?} vs {} membership flags",
            probs.shape(),
            in_t.len()
        )));
    }
    let class: Vec<Option<bool>> = in_t.iter().map(|&b| Some(b)).collect();
    align_terms(tape, probs, &class)
}

/// Three-way masked form of the alignment loss: positions classed `None`
/// contribute nothing (used to restrict the loss to the completion span).
fn align_terms(
    tape: &mut Tape,
    probs: &Value,
    class: &[Option<bool>],
) -> Result<Value, StoryLmError> {
    let m = class.len();
    let w1: Vec<f32> = class.iter().map(|c| if *c == Some(true) { 1.0 } else { 0.0 }).collect();
    let w2: Vec<f32> = class.iter().map(|c| if *c == Some(false) { 1.0 } else { 0.0 }).collect();
    let w1 = tape.constant(&[m], w1);
    let w2 = tape.constant(&[m], w2);
    let logp = tape.log_clamped(probs, PROB_FLOOR)?;
    let t1 = tape.mul(&logp, &w1)?;
    let s1 = tape.sum_all(&t1)?;
    let q = tape.sub_from_scalar(1.0, probs)?;
    let logq = tape.log_clamped(&q, PROB_FLOOR)?;
    let t2 = tape.mul(&logq, &w2)?;
    let s2 = tape.sum_all(&t2)?;
    let s = tape.add(&s1, &s2)?;
    Ok(tape.scale(&s, -1.0)?)
}

/// The full stage-2 training objective and its readout parts.
pub struct Stage2Parts {
    /// `completion + λ·alignment`; with λ = 0 this IS the completion loss
    /// node, so the two losses agree bitwise.
    pub total: Value,
    pub completion: f32,
    pub alignment: f32,
}

/// Build the stage-2 objective for one story. `t_set` is T = ∪ t_c over the
/// characters mentioned in the story; empty T disables the alignment term.
#[allow(clippy::too_many_arguments)]
pub fn stage2_objective(
    tape: &mut Tape,
    model: &StoryLmModel,
    store: &ParamStore,
    layout: &SequenceLayout,
    story: &[Vec<u16>],
    plans: &[crate::charmap::CharacterPlan],
    grids: &[crate::vqvae::TokenGrid],
    t_set: &[u16],
    lambda: f32,
    drop_rng: Option<&mut Rng>,
) -> Result<Stage2Parts, StoryLmError> {
    let seq = layout.stage2(story, plans, grids)?;
    let logits = sequence_logits(tape, model, store, seq.inputs(), drop_rng)?;
    let ce = masked_sequence_loss(tape, &logits, &seq)?;
    let completion = ce.data()[0];
    if lambda == 0.0 || t_set.is_empty() {
        return Ok(Stage2Parts { total: ce, completion, alignment: 0.0 });
    }
    let targets = seq.targets();
    let mask = seq.loss_mask();
    let probs = tape.softmax_pick(&logits, targets)?;
    let class: Vec<Option<bool>> = (0..targets.len())
        .map(|r| {
            if !mask[r] {
                return None;
            }
            let z = layout.visual_of(targets[r]).expect("loss rows hold visual tokens");
            Some(t_set.contains(&z))
        })
        .collect();
    let align = align_terms(tape, &probs, &class)?;
    let alignment = align.data()[0];
    let weighted = tape.scale(&align, lambda)?;
    let total = tape.add(&ce, &weighted)?;
    Ok(Stage2Parts { total, completion, alignment })
}
