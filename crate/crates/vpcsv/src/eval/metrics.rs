//! Set-based metrics over per-frame character predictions and generated
//! visual token sequences. Character sets are multi-hot rows over the fixed
//! roster; all rows must agree on roster size.

use super::EvalError;

fn check_sets(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<(), EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} predicted frames vs {} gold frames",
            pred.len(),
            gold.len()
        )));
    }
    let c = gold.first().map(|g| g.len()).unwrap_or(0);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != c || g.len() != c {
            return Err(EvalError::LengthMismatch(format!(
                "frame {i}: roster sizes {} / {} vs {c}",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// Pooled true/false positive/negative counts over frames × characters.
pub(crate) fn confusion(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fun) = (0u64, 0u64, 0u64);
    for (p, g) in pred.iter().zip(gold) {
        for (&pi, &gi) in p.iter().zip(g) {
            match (pi, gi) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fun += 1,
                (false, false) => {}
            }
        }
    }
    (tp, fp, fun)
}

fn f1_of(tp: u64, fp: u64, fun: u64) -> f64 {
    let denom = 2 * tp + fp + fun;
    if denom == 0 {
        // No positives anywhere on either side: perfect agreement.
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Micro-averaged multi-label F1: TP/FP/FN pooled over all frames and
/// characters before the ratio.
pub fn character_f1(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<f64, EvalError> {
    check_sets(pred, gold)?;
    let (tp, fp, fun) = confusion(pred, gold);
    Ok(f1_of(tp, fp, fun))
}

/// Macro-averaged variant: per-character F1 (pooled over frames), averaged
/// over the roster. Characters absent from both sides everywhere score 1.
pub fn character_f1_macro(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<f64, EvalError> {
    check_sets(pred, gold)?;
    let c = gold.first().map(|g| g.len()).unwrap_or(0);
    if c == 0 {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    for ch in 0..c {
        let (mut tp, mut fp, mut fun) = (0u64, 0u64, 0u64);
        for (p, g) in pred.iter().zip(gold) {
            match (p[ch], g[ch]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fun += 1,
                (false, false) => {}
            }
        }
        sum += f1_of(tp, fp, fun);
    }
    Ok(sum / c as f64)
}

/// Fraction of frames whose predicted character set equals the gold set
/// exactly (empty-vs-empty counts as a match).
pub fn frame_accuracy(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<f64, EvalError> {
    check_sets(pred, gold)?;
    if pred.is_empty() {
        return Err(EvalError::Malformed("no frames to score".into()));
    }
    let exact = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(exact as f64 / pred.len() as f64)
}

/// Story-level exact match: fraction of stories (consecutive blocks of
/// `frames_per_story` frames) whose every frame matches exactly.
pub fn story_exact_match(
    pred: &[Vec<bool>],
    gold: &[Vec<bool>],
    frames_per_story: usize,
) -> Result<f64, EvalError> {
    check_sets(pred, gold)?;
    if frames_per_story == 0 || !pred.len().is_multiple_of(frames_per_story) {
        return Err(EvalError::Malformed(format!(
            "{} frames do not divide into stories of {frames_per_story}",
            pred.len()
        )));
    }
    if pred.is_empty() {
        return Err(EvalError::Malformed("no frames to score".into()));
    }
    let stories = pred.len() / frames_per_story;
    let hit = (0..stories)
        .filter(|s| {
            let r = s * frames_per_story..(s + 1) * frames_per_story;
            pred[r.clone()] == gold[r]
        })
        .count();
    Ok(hit as f64 / stories as f64)
}

/// Per-story coverage of the alignment target set by the generated tokens,
/// averaged over stories with non-empty T.
pub fn coverage_ratio(generated: &[Vec<u16>], t_sets: &[Vec<u16>]) -> Result<f64, EvalError> {
    let per = coverage_per_story(generated, t_sets)?;
    let kept: Vec<f64> = per.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(EvalError::AllTargetsEmpty);
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Per-story coverage; `None` marks stories whose T is empty (skipped by
/// the headline average).
pub(crate) fn coverage_per_story(
    generated: &[Vec<u16>],
    t_sets: &[Vec<u16>],
) -> Result<Vec<Option<f64>>, EvalError> {
    if generated.len() != t_sets.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} generated stories vs {} target sets",
            generated.len(),
            t_sets.len()
        )));
    }
    Ok(generated
        .iter()
        .zip(t_sets)
        .map(|(z, t)| {
            if t.is_empty() {
                None
            } else {
                let covered = t.iter().filter(|tok| z.contains(tok)).count();
                Some(covered as f64 / t.len() as f64)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn set(c: usize, members: &[usize]) -> Vec<bool> {
        let mut v = vec![false; c];
        for &m in members {
            v[m] = true;
        }
        v
    }

    #[test]
    fn f1_and_accuracy_match_hand_enumeration() {
        // gold [{A,B},{C}], pred [{A},{B,C}] over roster {A,B,C}.
        let gold = vec![set(3, &[0, 1]), set(3, &[2])];
        let pred = vec![set(3, &[0]), set(3, &[1, 2])];
        let f1 = character_f1(&pred, &gold).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12, "TP=2 FP=1 FN=1 gives 2/3, got {f1}");
        assert_eq!(frame_accuracy(&pred, &gold).unwrap(), 0.0);
    }

    #[test]
    fn perfect_and_degenerate_predictions() {
        let gold = vec![set(4, &[0, 2]), set(4, &[]), set(4, &[3])];
        assert_eq!(character_f1(&gold, &gold).unwrap(), 1.0);
        assert_eq!(frame_accuracy(&gold, &gold).unwrap(), 1.0);

        let empty = vec![set(4, &[]); 3];
        assert_eq!(character_f1(&empty, &gold).unwrap(), 0.0);
        // Empty-vs-empty frames still count as exact matches.
        assert!((frame_accuracy(&empty, &gold).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(character_f1(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn metrics_are_invariant_under_frame_permutation() {
        let mut rng = Rng::new(9);
        let frames = 40;
        let c = 6;
        let rand_sets = |rng: &mut Rng| -> Vec<Vec<bool>> {
            (0..frames).map(|_| (0..c).map(|_| rng.below(3) == 0).collect()).collect()
        };
        let gold = rand_sets(&mut rng);
        let pred = rand_sets(&mut rng);
        let f1 = character_f1(&pred, &gold).unwrap();
        let acc = frame_accuracy(&pred, &gold).unwrap();

        let mut order: Vec<usize> = (0..frames).collect();
        rng.shuffle(&mut order);
        let pg: Vec<Vec<bool>> = order.iter().map(|&i| pred[i].clone()).collect();
        let gg: Vec<Vec<bool>> = order.iter().map(|&i| gold[i].clone()).collect();
        assert_eq!(character_f1(&pg, &gg).unwrap(), f1);
        assert_eq!(frame_accuracy(&pg, &gg).unwrap(), acc);
    }

    /// Frames that match exactly contribute TPs only — removing them can
    /// only raise the pooled FP/FN share, so F1 restricted to mismatched
    /// frames is never higher than overall F1.
    #[test]
    fn exact_match_frames_contribute_only_true_positives() {
        let mut rng = Rng::new(21);
        for trial in 0..50u64 {
            let mut t = Rng::new(trial).fork("t");
            let frames = 12;
            let c = 5;
            let gold: Vec<Vec<bool>> =
                (0..frames).map(|_| (0..c).map(|_| t.below(2) == 0).collect()).collect();
            let pred: Vec<Vec<bool>> = gold
                .iter()
                .map(|g| {
                    if rng.below(2) == 0 {
                        g.clone()
                    } else {
                        (0..c).map(|_| t.below(2) == 0).collect()
                    }
                })
                .collect();
            for (p, g) in pred.iter().zip(&gold) {
                if p == g {
                    let (_, fp, fun) = confusion(std::slice::from_ref(p), std::slice::from_ref(g));
                    assert_eq!((fp, fun), (0, 0));
                }
            }
            let mismatched: (Vec<_>, Vec<_>) = pred
                .iter()
                .zip(&gold)
                .filter(|(p, g)| p != g)
                .map(|(p, g)| (p.clone(), g.clone()))
                .unzip();
            if !mismatched.0.is_empty() {
                let overall = character_f1(&pred, &gold).unwrap();
                let worst = character_f1(&mismatched.0, &mismatched.1).unwrap();
                assert!(overall >= worst - 1e-12);
            }
        }
    }

    #[test]
    fn macro_f1_averages_per_character_scores() {
        // Char 0: perfect (F1 1). Char 1: never predicted, present once
        // (F1 0). Char 2: absent everywhere (F1 1 by convention).
        let gold = vec![set(3, &[0, 1]), set(3, &[0])];
        let pred = vec![set(3, &[0]), set(3, &[0])];
        let macro_f1 = character_f1_macro(&pred, &gold).unwrap();
        assert!((macro_f1 - (1.0 + 0.0 + 1.0) / 3.0).abs() < 1e-12);
        // Micro pools counts instead: TP=2, FP=0, FN=1 → 4/5.
        let micro = character_f1(&pred, &gold).unwrap();
        assert!((micro - 0.8).abs() < 1e-12);
    }

    #[test]
    fn story_level_exact_match_blocks_by_story() {
        let gold = vec![set(2, &[0]), set(2, &[1]), set(2, &[0]), set(2, &[])];
        let mut pred = gold.clone();
        pred[3] = set(2, &[1]); // breaks story 2 only
        assert_eq!(story_exact_match(&pred, &gold, 2).unwrap(), 0.5);
        assert!(story_exact_match(&pred, &gold, 3).is_err());
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let a = vec![set(3, &[0])];
        let b = vec![set(3, &[0]), set(3, &[1])];
        assert!(matches!(character_f1(&a, &b), Err(EvalError::LengthMismatch(_))));
        assert!(matches!(frame_accuracy(&a, &b), Err(EvalError::LengthMismatch(_))));
        let ragged = vec![set(2, &[0])];
        assert!(matches!(character_f1(&ragged, &a), Err(EvalError::LengthMismatch(_))));
    }

    #[test]
    fn coverage_matches_spec_examples_and_brute_force() {
        // Full coverage.
        assert_eq!(coverage_ratio(&[vec![1, 2, 3, 2]], &[vec![1, 2]]).unwrap(), 1.0);
        // Disjoint.
        assert_eq!(coverage_ratio(&[vec![4, 5]], &[vec![1, 2]]).unwrap(), 0.0);
        // Empty-T stories are skipped, not zero-counted.
        let r = coverage_ratio(&[vec![1], vec![9]], &[vec![1], vec![]]).unwrap();
        assert_eq!(r, 1.0);
        assert!(matches!(
            coverage_ratio(&[vec![1]], &[vec![]]),
            Err(EvalError::AllTargetsEmpty)
        ));

        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let z: Vec<u16> = (0..30).map(|_| rng.below(16) as u16).collect();
            let mut t: Vec<u16> = (0..5).map(|_| rng.below(16) as u16).collect();
            t.sort_unstable();
            t.dedup();
            let want = t.iter().filter(|tok| z.contains(tok)).count() as f64 / t.len() as f64;
            let got = coverage_ratio(&[z], &[t]).unwrap();
            assert!((got - want).abs() < 1e-12);
        }
    }

    /// Adding tokens to z never decreases coverage.
    #[test]
    fn coverage_is_monotone_in_generated_tokens() {
        let mut rng = Rng::new(8);
        for _ in 0..50 {
            let mut z: Vec<u16> = (0..10).map(|_| rng.below(12) as u16).collect();
            let t: Vec<u16> = (0..6).map(|_| rng.below(12) as u16).collect();
            let before = coverage_ratio(&[z.clone()], std::slice::from_ref(&t)).unwrap();
            z.push(rng.below(12) as u16);
            let after = coverage_ratio(&[z], &[t]).unwrap();
            assert!(after >= before);
        }
    }
}
