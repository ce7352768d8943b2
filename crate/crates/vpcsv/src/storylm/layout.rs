//! Unified token vocabulary and serialized sequence layouts.
//!
//! One id space covers text tokens, visual (codebook) tokens, and the six
//! specials. Stage-1 sequences are
//! `[BOS] s₁ [SEP] s₂ [SEP] … sₙ [PLAN] r₁ … r_m [EOS]` and stage-2 sequences
//! `[BOS] story [PLAN] plan [GEN] z₁ … z_m [EOS]`; the one-stage baseline is
//! stage 2 with an empty plan segment. Specials delimit every segment, so a
//! serialized sequence parses back into its parts unambiguously.

use super::StoryLmError;
use crate::charmap::CharacterPlan;
use crate::vqvae::TokenGrid;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    /// Text vocabulary size V_t; text tokens occupy ids `0..v_t`.
    pub v_t: usize,
    /// Codebook size K; visual tokens occupy ids `v_t..v_t+k`.
    pub k: usize,
    /// Frames per story.
    pub n: usize,
    /// Token grid side; each frame contributes `p*p` symbols.
    pub p: usize,
    /// Longest sentence the layout budgets for in [`Self::max_len`].
    pub max_sentence: usize,
}

/// A serialized training sequence plus the span its loss is computed on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    /// Token ids, `[BOS] … [EOS]`.
    pub ids: Vec<usize>,
    /// Index into `ids` of the first loss-bearing symbol.
    pub loss_start: usize,
    /// Number of loss-bearing symbols.
    pub loss_len: usize,
}

impl Sequence {
    /// Teacher-forcing inputs: every token except the last.
    pub fn inputs(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Next-token targets aligned with [`Self::inputs`].
    pub fn targets(&self) -> &[usize] {
        &self.ids[1..]
    }

    /// Per-target-row mask selecting the loss span.
    pub fn loss_mask(&self) -> Vec<bool> {
        let rows = self.ids.len() - 1;
        let lo = self.loss_start - 1;
        (0..rows).map(|r| r >= lo && r < lo + self.loss_len).collect()
    }
}

/// Segments recovered from a serialized sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    /// Sentences of text tokens.
    pub story: Vec<Vec<u16>>,
    /// Plan symbols (`None` = MASK); empty when the plan segment is empty.
    pub plan: Vec<Option<u16>>,
    /// Completion visual tokens; empty for stage-1 sequences.
    pub visual: Vec<u16>,
}

impl SequenceLayout {
    pub fn new(v_t: usize, k: usize, n: usize, p: usize, max_sentence: usize) -> Self {
        assert!(v_t > 0 && k > 0 && n > 0 && p > 0, "degenerate layout");
        SequenceLayout { v_t, k, n, p, max_sentence }
    }

    /// Total vocabulary size: text ∪ visual ∪ six specials.
    pub fn vocab_size(&self) -> usize {
        self.v_t + self.k + 6
    }

    /// Plan / completion segment length n·p².
    pub fn plan_len(&self) -> usize {
        self.n * self.p * self.p
    }

    pub fn mask_id(&self) -> usize {
        self.v_t + self.k
    }
    pub fn bos_id(&self) -> usize {
        self.v_t + self.k + 1
    }
    pub fn sep_id(&self) -> usize {
        self.v_t + self.k + 2
    }
    pub fn plan_id(&self) -> usize {
        self.v_t + self.k + 3
    }
    pub fn gen_id(&self) -> usize {
        self.v_t + self.k + 4
    }
    pub fn eos_id(&self) -> usize {
        self.v_t + self.k + 5
    }

    /// Longest possible stage-2 sequence under `max_sentence`; positional
    /// tables are sized to this.
    pub fn max_len(&self) -> usize {
        let story = self.n * self.max_sentence + (self.n - 1);
        1 + story + 1 + self.plan_len() + 1 + self.plan_len() + 1
    }

    pub fn text_id(&self, token: u16) -> Result<usize, StoryLmError> {
        if (token as usize) < self.v_t {
            Ok(token as usize)
        } else {
            Err(StoryLmError::BadText { token, v_t: self.v_t })
        }
    }

    pub fn visual_id(&self, token: u16) -> Result<usize, StoryLmError> {
        if (token as usize) < self.k {
            Ok(self.v_t + token as usize)
        } else {
            Err(StoryLmError::BadVisual { token, k: self.k })
        }
    }

    /// Inverse of [`Self::visual_id`]; `None` for ids outside the visual range.
    pub fn visual_of(&self, id: usize) -> Option<u16> {
        (self.v_t..self.v_t + self.k).contains(&id).then(|| (id - self.v_t) as u16)
    }

    fn check_len(&self, len: usize) -> Result<(), StoryLmError> {
        if len > self.max_len() {
            Err(StoryLmError::TooLong { len, max: self.max_len() })
        } else {
            Ok(())
        }
    }

    /// `[BOS] s₁ [SEP] … sₙ` — shared prefix of both stages.
    fn story_prefix(&self, story: &[Vec<u16>]) -> Result<Vec<usize>, StoryLmError> {
        if story.len() != self.n {
            return Err(StoryLmError::WrongFrames {
                what: "story sentences",
                want: self.n,
                got: story.len(),
            });
        }
        let mut ids = vec![self.bos_id()];
        for (i, sentence) in story.iter().enumerate() {
            if i > 0 {
                ids.push(self.sep_id());
            }
            for &t in sentence {
                ids.push(self.text_id(t)?);
            }
        }
        Ok(ids)
    }

    /// Plan symbols for `plans` (one [`CharacterPlan`] per frame): MASK for
    /// masked cells, the visual id otherwise.
    fn plan_symbols(&self, plans: &[CharacterPlan]) -> Result<Vec<usize>, StoryLmError> {
        if plans.len() != self.n {
            return Err(StoryLmError::WrongFrames {
                what: "frame plans",
                want: self.n,
                got: plans.len(),
            });
        }
        let mut ids = Vec::with_capacity(self.plan_len());
        for plan in plans {
            if plan.p != self.p {
                return Err(StoryLmError::WrongSide { got: plan.p, want: self.p });
            }
            for slot in &plan.slots {
                ids.push(match slot {
                    None => self.mask_id(),
                    Some(v) => self.visual_id(*v)?,
                });
            }
        }
        Ok(ids)
    }

    fn visual_symbols(&self, grids: &[TokenGrid]) -> Result<Vec<usize>, StoryLmError> {
        if grids.len() != self.n {
            return Err(StoryLmError::WrongFrames {
                what: "token grids",
                want: self.n,
                got: grids.len(),
            });
        }
        let mut ids = Vec::with_capacity(self.plan_len());
        for grid in grids {
            if grid.p != self.p {
                return Err(StoryLmError::WrongSide { got: grid.p, want: self.p });
            }
            for &z in grid.flatten() {
                ids.push(self.visual_id(z)?);
            }
        }
        Ok(ids)
    }

    /// Stage-1 planning sequence; the loss span is the plan segment.
    pub fn stage1(
        &self,
        story: &[Vec<u16>],
        plans: &[CharacterPlan],
    ) -> Result<Sequence, StoryLmError> {
        let mut ids = self.story_prefix(story)?;
        ids.push(self.plan_id());
        let loss_start = ids.len();
        ids.extend(self.plan_symbols(plans)?);
        ids.push(self.eos_id());
        self.check_len(ids.len())?;
        Ok(Sequence { ids, loss_start, loss_len: self.plan_len() })
    }

    /// Stage-2 completion sequence; the loss span is the visual segment.
    /// An empty `plans` slice produces the one-stage baseline layout
    /// `[BOS] story [PLAN] [GEN] z … [EOS]` with an empty plan segment.
    pub fn stage2(
        &self,
        story: &[Vec<u16>],
        plans: &[CharacterPlan],
        grids: &[TokenGrid],
    ) -> Result<Sequence, StoryLmError> {
        let mut ids = self.story_prefix(story)?;
        ids.push(self.plan_id());
        if !plans.is_empty() {
            ids.extend(self.plan_symbols(plans)?);
        }
        ids.push(self.gen_id());
        let loss_start = ids.len();
        ids.extend(self.visual_symbols(grids)?);
        ids.push(self.eos_id());
        self.check_len(ids.len())?;
        Ok(Sequence { ids, loss_start, loss_len: self.plan_len() })
    }

    /// Decoding prompt for plan generation: `[BOS] story [PLAN]`.
    pub fn prompt_stage1(&self, story: &[Vec<u16>]) -> Result<Vec<usize>, StoryLmError> {
        let mut ids = self.story_prefix(story)?;
        ids.push(self.plan_id());
        Ok(ids)
    }

    /// Decoding prompt for completion: `[BOS] story [PLAN] plan [GEN]`.
    /// An empty `plans` slice gives the one-stage baseline prompt.
    pub fn prompt_stage2(
        &self,
        story: &[Vec<u16>],
        plans: &[CharacterPlan],
    ) -> Result<Vec<usize>, StoryLmError> {
        let mut ids = self.story_prefix(story)?;
        ids.push(self.plan_id());
        if !plans.is_empty() {
            ids.extend(self.plan_symbols(plans)?);
        }
        ids.push(self.gen_id());
        Ok(ids)
    }

    /// Parse a serialized sequence back into its segments, validating every
    /// symbol against the segment's alphabet.
    pub fn decode_segments(&self, ids: &[usize]) -> Result<Segments, StoryLmError> {
        let bad = |msg: String| Err(StoryLmError::Malformed(msg));
        if ids.first() != Some(&self.bos_id()) {
            return bad("sequence must start with [BOS]".into());
        }
        if ids.last() != Some(&self.eos_id()) {
            return bad("sequence must end with [EOS]".into());
        }
        let body = &ids[1..ids.len() - 1];
        let plan_pos = match body.iter().position(|&t| t == self.plan_id()) {
            Some(p) => p,
            None => return bad("missing [PLAN]".into()),
        };

        let mut story = vec![Vec::new()];
        for &t in &body[..plan_pos] {
            if t == self.sep_id() {
                story.push(Vec::new());
            } else if t < self.v_t {
                story.last_mut().unwrap().push(t as u16);
            } else {
                return bad(format!("id {t} is not a text token or [SEP]"));
            }
        }
        if story.len() != self.n {
            return bad(format!("{} sentences, expected {}", story.len(), self.n));
        }

        let tail = &body[plan_pos + 1..];
        let gen_pos = tail.iter().position(|&t| t == self.gen_id());
        let (plan_syms, visual_syms) = match gen_pos {
            Some(g) => (&tail[..g], &tail[g + 1..]),
            None => (tail, &[][..]),
        };

        let mut plan = Vec::with_capacity(plan_syms.len());
        for &t in plan_syms {
            if t == self.mask_id() {
                plan.push(None);
            } else if let Some(v) = self.visual_of(t) {
                plan.push(Some(v));
            } else {
                return bad(format!("id {t} is not a plan symbol"));
            }
        }
        if !plan.is_empty() && plan.len() != self.plan_len() {
            return bad(format!("plan segment of {} symbols, expected {}", plan.len(), self.plan_len()));
        }

        let mut visual = Vec::with_capacity(visual_syms.len());
        for &t in visual_syms {
            match self.visual_of(t) {
                Some(v) => visual.push(v),
                None => return bad(format!("id {t} is not a visual token")),
            }
        }
        if !visual.is_empty() && visual.len() != self.plan_len() {
            return bad(format!(
                "visual segment of {} symbols, expected {}",
                visual.len(),
                self.plan_len()
            ));
        }

        Ok(Segments { story, plan, visual })
    }
}
