//! Per-character visual-token statistics: which codebook tokens most often
//! fill a character's planned region cells in the training split. The top-k
//! lists seed the alignment target set T.

use std::collections::BTreeMap;
use std::path::Path;

use super::StoryLmError;
use crate::charmap::CharacterPlan;

/// Ranked `(token, count)` lists, indexed by character id. Ties rank the
/// smaller token id first so the ordering is total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharTokenStats {
    pub k: usize,
    pub per_char: Vec<Vec<(u16, u64)>>,
}

impl CharTokenStats {
    /// Signature tokens of character `c` (the ids of its top-k list).
    pub fn tokens_of(&self, c: usize) -> Vec<u16> {
        self.per_char[c].iter().map(|&(t, _)| t).collect()
    }
}

/// Count each visual token over the non-MASK plan cells of frames whose
/// paragraph mentions character `c`; keep the `k` most frequent per character.
///
/// `mentions[s][f][c]` says whether story `s`, frame `f` mentions `c`;
/// `plans[s][f]` is that frame's region plan. A character that is never
/// mentioned gets an empty list and a warning on stderr.
pub fn character_token_stats(
    mentions: &[Vec<Vec<bool>>],
    plans: &[Vec<CharacterPlan>],
    num_characters: usize,
    k: usize,
) -> Result<CharTokenStats, StoryLmError> {
    if mentions.len() != plans.len() {
        return Err(StoryLmError::Malformed(format!(
            "{} mention stories vs {} plan stories",
            mentions.len(),
            plans.len()
        )));
    }
    let mut counts: Vec<BTreeMap<u16, u64>> = vec![BTreeMap::new(); num_characters];
    for (story_mentions, story_plans) in mentions.iter().zip(plans) {
        if story_mentions.len() != story_plans.len() {
            return Err(StoryLmError::Malformed(format!(
                "{} mention frames vs {} plan frames",
                story_mentions.len(),
                story_plans.len()
            )));
        }
        for (frame_mentions, plan) in story_mentions.iter().zip(story_plans) {
            if frame_mentions.len() != num_characters {
                return Err(StoryLmError::Malformed(format!(
                    "{} mention flags vs {num_characters} characters",
                    frame_mentions.len()
                )));
            }
            for (c, &mentioned) in frame_mentions.iter().enumerate() {
                if !mentioned {
                    continue;
                }
                for slot in plan.slots.iter().flatten() {
                    *counts[c].entry(*slot).or_insert(0) += 1;
                }
            }
        }
    }
    let per_char: Vec<Vec<(u16, u64)>> = counts
        .into_iter()
        .enumerate()
        .map(|(c, map)| {
            if map.is_empty() {
                eprintln!("warning: character {c} is never mentioned; empty token statistics");
                return Vec::new();
            }
            let mut ranked: Vec<(u16, u64)> = map.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(k);
            ranked
        })
        .collect();
    Ok(CharTokenStats { k, per_char })
}

/// T = ∪_c t_c over the characters flagged in `mentioned` (any frame),
/// deduplicated and sorted.
pub fn union_tokens(stats: &CharTokenStats, mentioned: &[bool]) -> Vec<u16> {
    let mut t: Vec<u16> = mentioned
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .flat_map(|(c, _)| stats.tokens_of(c))
        .collect();
    t.sort_unstable();
    t.dedup();
    t
}

/// JSON map `character_id → [[token, count], …]`.
pub fn save_stats(path: &Path, stats: &CharTokenStats) -> Result<(), StoryLmError> {
    let map: BTreeMap<String, &Vec<(u16, u64)>> = stats
        .per_char
        .iter()
        .enumerate()
        .map(|(c, list)| (c.to_string(), list))
        .collect();
    let json = serde_json::to_string_pretty(&map).expect("stats serialize");
    std::fs::write(path, json).map_err(|e| {
        StoryLmError::Dataset(crate::dataset::DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}

pub fn load_stats(path: &Path, k: usize) -> Result<CharTokenStats, StoryLmError> {
    let corrupt = |detail: String| {
        StoryLmError::Dataset(crate::dataset::DatasetError::Corrupt {
            path: path.display().to_string(),
            detail,
        })
    };
    let text = std::fs::read_to_string(path).map_err(|e| {
        StoryLmError::Dataset(crate::dataset::DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })
    })?;
    let map: BTreeMap<String, Vec<(u16, u64)>> =
        serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let n = map.len();
    let mut per_char = vec![Vec::new(); n];
    for (key, list) in map {
        let c: usize = key
            .parse()
            .map_err(|_| corrupt(format!("character key {key:?} is not an index")))?;
        if c >= n {
            return Err(corrupt(format!("character {c} out of range for {n} entries")));
        }
        per_char[c] = list;
    }
    Ok(CharTokenStats { k, per_char })
}
