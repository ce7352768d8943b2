//! Template text over a closed vocabulary.
//!
//! Paragraph shapes (one per frame, ≤ 12 tokens):
//!   "the <bg> is empty ."
//!   "<name> <verb> [<adverb>] in the <bg> ."
//!   "<name> and <name> <verb> [<adverb>] in the <bg> ."
//!   "<name> , <name> and <name> <verb> [<adverb>] in the <bg> ."
//!
//! Token id == index into [`VOCAB`]; names occupy a contiguous block, so
//! recovering mentions from a paragraph is a range check.

use super::{SceneSpec, Sprite, NUM_CHARACTERS};
use crate::numeric::Rng;

pub const STRUCT_WORDS: [&str; 7] = [".", ",", "the", "and", "in", "is", "empty"];
pub const VERBS: [&str; 12] = [
    "jumps", "sleeps", "waves", "runs", "sings", "hides", "dances", "spins", "climbs", "digs",
    "floats", "naps",
];
pub const ADVERBS: [&str; 4] = ["happily", "quietly", "slowly", "fast"];
pub const BACKGROUND_WORDS: [&str; 8] = [
    "meadow", "night", "sea", "desert", "forest", "snow", "cave", "city",
];

pub const MAX_PARAGRAPH_TOKENS: usize = 12;

const NAME_BASE: usize = STRUCT_WORDS.len();
const VERB_BASE: usize = NAME_BASE + NUM_CHARACTERS;
const ADVERB_BASE: usize = VERB_BASE + VERBS.len();
const BG_BASE: usize = ADVERB_BASE + ADVERBS.len();
/// Total closed-vocabulary size (39).
pub const VOCAB_SIZE: usize = BG_BASE + BACKGROUND_WORDS.len();

/// The whole vocabulary in id order.
pub fn vocab(roster: &[Sprite]) -> Vec<String> {
    let mut v: Vec<String> = STRUCT_WORDS.iter().map(|s| s.to_string()).collect();
    v.extend(roster.iter().map(|s| s.name.to_string()));
    v.extend(VERBS.iter().map(|s| s.to_string()));
    v.extend(ADVERBS.iter().map(|s| s.to_string()));
    v.extend(BACKGROUND_WORDS.iter().map(|s| s.to_string()));
    v
}

pub fn name_token(character_id: usize) -> u16 {
    (NAME_BASE + character_id) as u16
}

/// Inverse of [`name_token`]; `None` for non-name tokens.
pub fn character_of_token(token: u16) -> Option<usize> {
    let t = token as usize;
    (NAME_BASE..NAME_BASE + NUM_CHARACTERS).contains(&t).then(|| t - NAME_BASE)
}

fn tok(word: &str) -> u16 {
    STRUCT_WORDS
        .iter()
        .position(|&w| w == word)
        .expect("structural word") as u16
}

/// One paragraph for one frame. Names appear in placement order; the verb,
/// optional adverb, and background word come from the story RNG.
pub fn paragraph(scene: &SceneSpec, rng: &mut Rng) -> Vec<u16> {
    let bg = (BG_BASE + scene.background_id) as u16;
    let mut out = Vec::with_capacity(MAX_PARAGRAPH_TOKENS);
    if scene.placed.is_empty() {
        out.extend([tok("the"), bg, tok("is"), tok("empty"), tok(".")]);
        return out;
    }
    let names: Vec<u16> = scene.placed.iter().map(|p| name_token(p.character_id)).collect();
    match names.len() {
        1 => out.push(names[0]),
        2 => out.extend([names[0], tok("and"), names[1]]),
        _ => out.extend([names[0], tok(","), names[1], tok("and"), names[2]]),
    }
    out.push((VERB_BASE + rng.below(VERBS.len())) as u16);
    if rng.uniform() < 0.5 {
        out.push((ADVERB_BASE + rng.below(ADVERBS.len())) as u16);
    }
    out.extend([tok("in"), tok("the"), bg, tok(".")]);
    debug_assert!(out.len() <= MAX_PARAGRAPH_TOKENS);
    out
}

/// Recover the mention vector from a paragraph's tokens.
pub fn mentions_from_tokens(tokens: &[u16]) -> Vec<bool> {
    let mut m = vec![false; NUM_CHARACTERS];
    for &t in tokens {
        if let Some(c) = character_of_token(t) {
            m[c] = true;
        }
    }
    m
}

/// Render token ids back to words (debug output, report panels).
pub fn detokenize(tokens: &[u16], vocab: &[String]) -> String {
    tokens
        .iter()
        .map(|&t| vocab.get(t as usize).map(|s| s.as_str()).unwrap_or("<?>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::super::{Placement, ROSTER};
    use super::*;

    fn scene_with(ids: &[usize]) -> SceneSpec {
        SceneSpec {
            frame_index: 0,
            placed: ids
                .iter()
                .map(|&id| Placement { character_id: id, cx: 16, cy: 16, scale: 1.0 })
                .collect(),
            background_id: 3,
        }
    }

    #[test]
    fn vocab_is_stable_and_within_budget() {
        let v = vocab(&ROSTER);
        assert_eq!(v.len(), VOCAB_SIZE);
        assert!(VOCAB_SIZE <= 40);
        assert_eq!(v[NAME_BASE], "pip");
        assert_eq!(v[BG_BASE + 3], "desert");
        // All words unique.
        let set: std::collections::BTreeSet<&String> = v.iter().collect();
        assert_eq!(set.len(), v.len());
    }

    #[test]
    fn single_character_paragraph_names_exactly_that_character() {
        let mut rng = Rng::new(3);
        let p = paragraph(&scene_with(&[2]), &mut rng);
        let names: Vec<usize> = p.iter().filter_map(|&t| character_of_token(t)).collect();
        assert_eq!(names, [2]);
        assert!(p.len() <= MAX_PARAGRAPH_TOKENS);
    }

    #[test]
    fn empty_scene_paragraph_has_zero_name_tokens() {
        let mut rng = Rng::new(4);
        let p = paragraph(&scene_with(&[]), &mut rng);
        assert!(p.iter().all(|&t| character_of_token(t).is_none()));
        let v = vocab(&ROSTER);
        assert_eq!(detokenize(&p, &v), "the desert is empty .");
    }

    #[test]
    fn mention_roundtrip_over_all_subsets() {
        let mut rng = Rng::new(5);
        for ids in [vec![], vec![7], vec![0, 5], vec![1, 3, 6]] {
            let p = paragraph(&scene_with(&ids), &mut rng);
            assert!(p.len() <= MAX_PARAGRAPH_TOKENS);
            let m = mentions_from_tokens(&p);
            for c in 0..NUM_CHARACTERS {
                assert_eq!(m[c], ids.contains(&c), "character {c} in {ids:?}");
            }
        }
    }
}
