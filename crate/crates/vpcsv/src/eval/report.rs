//! Report assembly: run the frozen classifier over generated frames, compute
//! the headline metrics plus a per-story breakdown, and serialize the result
//! as JSON or a flat CSV row per system.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::charmap::{ids_from_logits, Classifier};
use crate::dataset::{load_image, DatasetManifest};
use crate::numeric::{ParamStore, Tape};
use crate::vqvae::{load_token_sequences, TokenGrid};

use super::frechet::frechet_distance;
use super::metrics::{
    character_f1, character_f1_macro, confusion, coverage_per_story, coverage_ratio,
    frame_accuracy, story_exact_match,
};
use super::EvalError;

/// One system's generated artifacts for a single story.
#[derive(Debug, Clone)]
pub struct StoryOutputs {
    /// Generated visual token grids, one per frame.
    pub grids: Vec<TokenGrid>,
    /// Decoded frames in [3,H,W] layout with values in [0, 1], one per grid.
    pub frames: Vec<Vec<f32>>,
}

/// The exact configuration a report was produced under, echoed verbatim so
/// different systems can be compared for fairness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub seed: u64,
    pub vqvae_ckpt: String,
    pub classifier_ckpt: String,
    pub lm_ckpt: String,
    pub gamma: f32,
    pub lambda: f32,
    pub threshold: f32,
}

/// Per-story slice of the pooled statistics; rows re-aggregate to the
/// headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryBreakdown {
    pub story: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub frames_exact: usize,
    pub frames: usize,
    /// `None` marks a story whose alignment target set T is empty.
    pub coverage: Option<f64>,
}

/// Full evaluation of one system on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub character_f1: f64,
    pub frame_accuracy: f64,
    pub fid: f64,
    pub coverage_ratio: f64,
    /// Story-level exact match, reported alongside the frame-level headline.
    pub story_exact_match: f64,
    /// Macro-averaged F1, reported alongside the micro-averaged headline.
    pub character_f1_macro: f64,
    pub per_story: Vec<StoryBreakdown>,
    pub config: EvalConfigEcho,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "system,seed,character_f1,frame_accuracy,fid,coverage_ratio,story_exact_match,character_f1_macro"
    }

    /// One flat CSV row for cross-system table assembly.
    pub fn csv_row(&self, system: &str) -> String {
        format!(
            "{system},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.config.seed,
            self.character_f1,
            self.frame_accuracy,
            self.fid,
            self.coverage_ratio,
            self.story_exact_match,
            self.character_f1_macro,
        )
    }
}

/// Mean of the headline numbers over several runs of the same system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub character_f1: f64,
    pub frame_accuracy: f64,
    pub fid: f64,
    pub coverage_ratio: f64,
    pub story_exact_match: f64,
    pub character_f1_macro: f64,
}

impl AggregateReport {
    pub fn csv_header() -> &'static str {
        "system,runs,character_f1,frame_accuracy,fid,coverage_ratio,story_exact_match,character_f1_macro"
    }

    pub fn csv_row(&self, system: &str) -> String {
        format!(
            "{system},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.runs,
            self.character_f1,
            self.frame_accuracy,
            self.fid,
            self.coverage_ratio,
            self.story_exact_match,
            self.character_f1_macro,
        )
    }
}

/// Predicted character set and pooled penultimate features for one frame.
fn classify_frame(
    classifier: &Classifier,
    store: &ParamStore,
    chw: &[f32],
    threshold: f32,
) -> Result<(Vec<bool>, Vec<f32>), EvalError> {
    let want = 3 * classifier.h * classifier.w;
    if chw.len() != want {
        return Err(EvalError::LengthMismatch(format!(
            "frame buffer has {} floats, classifier expects {want}",
            chw.len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(&[3, classifier.h, classifier.w], chw.to_vec());
    let out = classifier.forward(&mut tape, store, &x)?;
    let mut set = vec![false; classifier.c];
    for id in ids_from_logits(out.logits.data(), threshold) {
        set[id] = true;
    }
    let fmap = out.features.data();
    let hw = classifier.f * classifier.f;
    let pooled: Vec<f32> = (0..classifier.ch)
        .map(|c| {
            let sum: f64 = fmap[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).sum();
            (sum / hw as f64) as f32
        })
        .collect();
    Ok((set, pooled))
}

/// Score one system: classify every generated frame, pool the four metrics,
/// and slice them back out per story.
///
/// `real_frames` are the gold frames of the same stories; they anchor the
/// Fréchet distance in the classifier's feature space. `t_sets` are the
/// per-story alignment target sets the coverage ratio is measured against.
pub fn evaluate(
    outputs: &[StoryOutputs],
    gold_mentions: &[Vec<Vec<bool>>],
    real_frames: &[Vec<Vec<f32>>],
    t_sets: &[Vec<u16>],
    classifier: &Classifier,
    store: &ParamStore,
    config: EvalConfigEcho,
) -> Result<EvalReport, EvalError> {
    let stories = outputs.len();
    if stories == 0 {
        return Err(EvalError::Malformed("no stories to evaluate".into()));
    }
    if gold_mentions.len() != stories || real_frames.len() != stories || t_sets.len() != stories {
        return Err(EvalError::LengthMismatch(format!(
            "{stories} outputs vs {} gold mention sets, {} real stories, {} target sets",
            gold_mentions.len(),
            real_frames.len(),
            t_sets.len()
        )));
    }
    let n = outputs[0].grids.len();
    if n == 0 {
        return Err(EvalError::Malformed("stories have zero frames".into()));
    }
    for s in 0..stories {
        if outputs[s].grids.len() != n
            || outputs[s].frames.len() != n
            || gold_mentions[s].len() != n
            || real_frames[s].len() != n
        {
            return Err(EvalError::LengthMismatch(format!(
                "story {s}: expected {n} frames throughout, got {} grids / {} frames / {} gold / {} real",
                outputs[s].grids.len(),
                outputs[s].frames.len(),
                gold_mentions[s].len(),
                real_frames[s].len()
            )));
        }
        if let Some(bad) = gold_mentions[s].iter().find(|m| m.len() != classifier.c) {
            return Err(EvalError::LengthMismatch(format!(
                "story {s}: gold mention set over {} characters, classifier has {}",
                bad.len(),
                classifier.c
            )));
        }
    }

    let mut pred: Vec<Vec<bool>> = Vec::with_capacity(stories * n);
    let mut gold: Vec<Vec<bool>> = Vec::with_capacity(stories * n);
    let mut gen_features: Vec<Vec<f32>> = Vec::with_capacity(stories * n);
    let mut real_features: Vec<Vec<f32>> = Vec::with_capacity(stories * n);
    for s in 0..stories {
        for f in 0..n {
            let (set, feat) =
                classify_frame(classifier, store, &outputs[s].frames[f], config.threshold)?;
            pred.push(set);
            gen_features.push(feat);
            gold.push(gold_mentions[s][f].clone());
            let (_, feat) = classify_frame(classifier, store, &real_frames[s][f], config.threshold)?;
            real_features.push(feat);
        }
    }

    let generated: Vec<Vec<u16>> = outputs
        .iter()
        .map(|o| o.grids.iter().flat_map(|g| g.flatten().iter().copied()).collect())
        .collect();

    let per_cov = coverage_per_story(&generated, t_sets)?;
    let per_story = (0..stories)
        .map(|s| {
            let r = s * n..(s + 1) * n;
            let (tp, fp, fn_) = confusion(&pred[r.clone()], &gold[r.clone()]);
            let frames_exact = pred[r.clone()]
                .iter()
                .zip(&gold[r])
                .filter(|(p, g)| p == g)
                .count();
            StoryBreakdown { story: s, tp, fp, fn_, frames_exact, frames: n, coverage: per_cov[s] }
        })
        .collect();

    Ok(EvalReport {
        character_f1: character_f1(&pred, &gold)?,
        frame_accuracy: frame_accuracy(&pred, &gold)?,
        fid: frechet_distance(&real_features, &gen_features)?,
        coverage_ratio: coverage_ratio(&generated, t_sets)?,
        story_exact_match: story_exact_match(&pred, &gold, n)?,
        character_f1_macro: character_f1_macro(&pred, &gold)?,
        per_story,
        config,
    })
}

/// Load one system's generated artifacts for a manifest split.
///
/// For each story `<name>` the loader expects token grids at
/// `dir/<split>/<name>.tokens.json` and decoded frames at
/// `dir/<split>/<name>/frame_<i>.png`. Stories with any piece missing are
/// collected and reported together.
pub fn load_outputs(
    dir: &Path,
    manifest: &DatasetManifest,
    split: &str,
    p: usize,
    k: usize,
) -> Result<Vec<StoryOutputs>, EvalError> {
    let rels = manifest
        .split(split)
        .ok_or_else(|| EvalError::Malformed(format!("unknown split {split:?}")))?;
    let base = dir.join(split);
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for rel in rels {
        let name = Path::new(rel)
            .file_name()
            .ok_or_else(|| EvalError::Malformed(format!("unusable sample path {rel:?}")))?
            .to_string_lossy()
            .into_owned();
        let tokens_path = base.join(format!("{name}.tokens.json"));
        let frames_dir = base.join(&name);
        let have_frames =
            (0..manifest.n).all(|i| frames_dir.join(format!("frame_{i}.png")).is_file());
        if !tokens_path.is_file() || !have_frames {
            missing.push(rel.clone());
            continue;
        }
        let grids = load_token_sequences(&tokens_path, p, k)?;
        if grids.len() != manifest.n {
            return Err(EvalError::Malformed(format!(
                "{}: {} grids for a {}-frame story",
                tokens_path.display(),
                grids.len(),
                manifest.n
            )));
        }
        let mut frames = Vec::with_capacity(manifest.n);
        for i in 0..manifest.n {
            let img = load_image(&frames_dir.join(format!("frame_{i}.png")))?;
            if img.h != manifest.h || img.w != manifest.w {
                return Err(EvalError::Malformed(format!(
                    "{}: frame is {}x{}, dataset is {}x{}",
                    frames_dir.display(),
                    img.h,
                    img.w,
                    manifest.h,
                    manifest.w
                )));
            }
            frames.push(img.to_chw());
        }
        out.push(StoryOutputs { grids, frames });
    }
    if !missing.is_empty() {
        return Err(EvalError::MissingOutputs(missing));
    }
    Ok(out)
}

/// Mean of the headline numbers across runs (the paper averages three).
pub fn aggregate_reports(reports: &[EvalReport]) -> Result<AggregateReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Malformed("no reports to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(AggregateReport {
        runs: reports.len(),
        character_f1: mean(|r| r.character_f1),
        frame_accuracy: mean(|r| r.frame_accuracy),
        fid: mean(|r| r.fid),
        coverage_ratio: mean(|r| r.coverage_ratio),
        story_exact_match: mean(|r| r.story_exact_match),
        character_f1_macro: mean(|r| r.character_f1_macro),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charmap::CharMapConfig;
    use crate::dataset::{generate_dataset, load_split, DatasetConfig};
    use crate::numeric::Rng;
    use crate::vqvae::save_token_sequences;

    fn echo(seed: u64) -> EvalConfigEcho {
        EvalConfigEcho {
            seed,
            vqvae_ckpt: "vqvae.bin".into(),
            classifier_ckpt: "charmap.bin".into(),
            lm_ckpt: "lm.bin".into(),
            gamma: 0.5,
            lambda: 0.1,
            threshold: 0.5,
        }
    }

    fn tiny_classifier(c: usize, ch: usize, hw: usize, seed: u64) -> (Classifier, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = CharMapConfig { ch, ..CharMapConfig::default() };
        let mut rng = Rng::new(seed);
        let clf = Classifier::init(&mut store, &cfg, c, hw, hw, &mut rng);
        (clf, store)
    }

    /// Random frames, random gold sets, random grids: a pure noise system.
    fn noise_inputs(
        stories: usize,
        n: usize,
        c: usize,
        hw: usize,
        p: usize,
        k: usize,
        seed: u64,
    ) -> (Vec<StoryOutputs>, Vec<Vec<Vec<bool>>>, Vec<Vec<Vec<f32>>>, Vec<Vec<u16>>) {
        let mut rng = Rng::new(seed);
        let frame = |rng: &mut Rng| (0..3 * hw * hw).map(|_| rng.uniform()).collect::<Vec<f32>>();
        let outputs: Vec<StoryOutputs> = (0..stories)
            .map(|_| StoryOutputs {
                grids: (0..n)
                    .map(|_| {
                        TokenGrid::new(p, (0..p * p).map(|_| rng.below(k) as u16).collect())
                    })
                    .collect(),
                frames: (0..n).map(|_| frame(&mut rng)).collect(),
            })
            .collect();
        let gold: Vec<Vec<Vec<bool>>> = (0..stories)
            .map(|_| (0..n).map(|_| (0..c).map(|_| rng.uniform() < 0.4).collect()).collect())
            .collect();
        let real: Vec<Vec<Vec<f32>>> =
            (0..stories).map(|_| (0..n).map(|_| frame(&mut rng)).collect()).collect();
        let t_sets: Vec<Vec<u16>> = (0..stories)
            .map(|_| {
                let mut t: Vec<u16> = (0..3).map(|_| rng.below(k) as u16).collect();
                t.sort_unstable();
                t.dedup();
                t
            })
            .collect();
        (outputs, gold, real, t_sets)
    }

    #[test]
    fn noise_system_report_stays_in_range_and_breakdown_reassembles_headlines() {
        let (c, ch, hw, p, k) = (5, 8, 16, 2, 6);
        let (clf, store) = tiny_classifier(c, ch, hw, 3);
        let (outputs, gold, real, t_sets) = noise_inputs(4, 3, c, hw, p, k, 17);
        let report = evaluate(&outputs, &gold, &real, &t_sets, &clf, &store, echo(3)).unwrap();

        for v in [
            report.character_f1,
            report.frame_accuracy,
            report.coverage_ratio,
            report.story_exact_match,
            report.character_f1_macro,
        ] {
            assert!((0.0..=1.0).contains(&v), "metric out of range: {v}");
        }
        assert!(report.fid.is_finite() && report.fid >= 0.0);

        // Rows must re-aggregate to the headline numbers.
        assert_eq!(report.per_story.len(), 4);
        let (tp, fp, fn_) = report
            .per_story
            .iter()
            .fold((0u64, 0u64, 0u64), |a, r| (a.0 + r.tp, a.1 + r.fp, a.2 + r.fn_));
        let micro = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64);
        assert!((micro - report.character_f1).abs() < 1e-9);

        let exact: usize = report.per_story.iter().map(|r| r.frames_exact).sum();
        let frames: usize = report.per_story.iter().map(|r| r.frames).sum();
        assert!((exact as f64 / frames as f64 - report.frame_accuracy).abs() < 1e-9);

        let covs: Vec<f64> = report.per_story.iter().filter_map(|r| r.coverage).collect();
        let cov = covs.iter().sum::<f64>() / covs.len() as f64;
        assert!((cov - report.coverage_ratio).abs() < 1e-9);

        let full: usize =
            report.per_story.iter().filter(|r| r.frames_exact == r.frames).count();
        assert!(
            (full as f64 / report.per_story.len() as f64 - report.story_exact_match).abs() < 1e-9
        );
    }

    #[test]
    fn self_evaluation_scores_near_zero_fid_and_classifier_self_agreement() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { train: 1, val: 1, test: 3, ..DatasetConfig::default() };
        let manifest = generate_dataset(dir.path(), &cfg, 99).unwrap();
        let samples = load_split(dir.path(), &manifest, "test").unwrap();

        let (clf, store) = tiny_classifier(cfg.c, 8, cfg.h, 5);
        let (p, k) = (4, 32);
        let mut rng = Rng::new(11);
        // Gold frames stand in for the generated ones; grids cover T fully.
        let t_sets: Vec<Vec<u16>> = (0..samples.len()).map(|_| vec![1, 5, 9]).collect();
        let outputs: Vec<StoryOutputs> = samples
            .iter()
            .map(|s| StoryOutputs {
                grids: (0..cfg.n)
                    .map(|_| {
                        let mut idx: Vec<u16> =
                            (0..p * p).map(|_| rng.below(k) as u16).collect();
                        idx[0] = 1;
                        idx[1] = 5;
                        idx[2] = 9;
                        TokenGrid::new(p, idx)
                    })
                    .collect(),
                frames: s.frames.iter().map(|f| f.to_chw()).collect(),
            })
            .collect();
        let gold: Vec<Vec<Vec<bool>>> = samples.iter().map(|s| s.mentions.clone()).collect();
        let real: Vec<Vec<Vec<f32>>> =
            samples.iter().map(|s| s.frames.iter().map(|f| f.to_chw()).collect()).collect();

        let report = evaluate(&outputs, &gold, &real, &t_sets, &clf, &store, echo(99)).unwrap();

        // Identical real/generated frames → identical feature clouds.
        assert!(report.fid < 1e-3, "fid = {}", report.fid);
        assert_eq!(report.coverage_ratio, 1.0);

        // The Character F1 of a self-evaluation is exactly the classifier's
        // agreement with the gold labels, computed independently here.
        let mut pred = Vec::new();
        let mut flat_gold = Vec::new();
        for s in &samples {
            for (f, m) in s.frames.iter().zip(&s.mentions) {
                let (set, _) = classify_frame(&clf, &store, &f.to_chw(), 0.5).unwrap();
                pred.push(set);
                flat_gold.push(m.clone());
            }
        }
        assert_eq!(report.character_f1, character_f1(&pred, &flat_gold).unwrap());
        assert_eq!(report.frame_accuracy, frame_accuracy(&pred, &flat_gold).unwrap());

        // Report serializes and round-trips.
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.per_story, report.per_story);
        assert_eq!(back.config, report.config);
        assert_eq!(back.character_f1, report.character_f1);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let (c, ch, hw, p, k) = (5, 8, 16, 2, 6);
        let (clf, store) = tiny_classifier(c, ch, hw, 3);
        let (outputs, gold, real, t_sets) = noise_inputs(4, 3, c, hw, p, k, 17);

        assert!(matches!(
            evaluate(&outputs[..3], &gold, &real, &t_sets, &clf, &store, echo(0)),
            Err(EvalError::LengthMismatch(_))
        ));

        let mut short = gold.clone();
        short[2].pop();
        assert!(matches!(
            evaluate(&outputs, &short, &real, &t_sets, &clf, &store, echo(0)),
            Err(EvalError::LengthMismatch(_))
        ));

        let mut wide = gold.clone();
        wide[1][0].push(false);
        assert!(matches!(
            evaluate(&outputs, &wide, &real, &t_sets, &clf, &store, echo(0)),
            Err(EvalError::LengthMismatch(_))
        ));

        let mut bad_frame = outputs.clone();
        bad_frame[0].frames[0].pop();
        assert!(matches!(
            evaluate(&bad_frame, &gold, &real, &t_sets, &clf, &store, echo(0)),
            Err(EvalError::LengthMismatch(_))
        ));

        assert!(matches!(
            evaluate(&[], &[], &[], &[], &clf, &store, echo(0)),
            Err(EvalError::Malformed(_))
        ));
    }

    #[test]
    fn aggregation_is_the_arithmetic_mean_of_runs() {
        let (c, ch, hw, p, k) = (5, 8, 16, 2, 6);
        let (clf, store) = tiny_classifier(c, ch, hw, 3);
        let reports: Vec<EvalReport> = (0..3)
            .map(|seed| {
                let (outputs, gold, real, t_sets) = noise_inputs(4, 3, c, hw, p, k, 100 + seed);
                evaluate(&outputs, &gold, &real, &t_sets, &clf, &store, echo(seed)).unwrap()
            })
            .collect();
        let agg = aggregate_reports(&reports).unwrap();
        assert_eq!(agg.runs, 3);
        let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / 3.0;
        assert_eq!(agg.character_f1, mean(|r| r.character_f1));
        assert_eq!(agg.frame_accuracy, mean(|r| r.frame_accuracy));
        assert_eq!(agg.fid, mean(|r| r.fid));
        assert_eq!(agg.coverage_ratio, mean(|r| r.coverage_ratio));
        assert_eq!(agg.story_exact_match, mean(|r| r.story_exact_match));
        assert!(matches!(aggregate_reports(&[]), Err(EvalError::Malformed(_))));
    }

    #[test]
    fn csv_rows_line_up_with_the_headers() {
        let (c, ch, hw, p, k) = (5, 8, 16, 2, 6);
        let (clf, store) = tiny_classifier(c, ch, hw, 3);
        let (outputs, gold, real, t_sets) = noise_inputs(4, 3, c, hw, p, k, 17);
        let report = evaluate(&outputs, &gold, &real, &t_sets, &clf, &store, echo(7)).unwrap();
        let row = report.csv_row("vp-csv");
        assert_eq!(row.split(',').count(), EvalReport::csv_header().split(',').count());
        assert!(row.starts_with("vp-csv,7,"));
        let agg = aggregate_reports(std::slice::from_ref(&report)).unwrap();
        let row = agg.csv_row("vp-csv");
        assert_eq!(row.split(',').count(), AggregateReport::csv_header().split(',').count());
        assert!(row.starts_with("vp-csv,1,"));
    }

    #[test]
    fn load_outputs_reports_every_missing_story() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { train: 1, val: 1, test: 3, ..DatasetConfig::default() };
        let manifest = generate_dataset(dir.path(), &cfg, 7).unwrap();
        let (p, k) = (2, 6);

        let out_dir = dir.path().join("generated");
        let split_dir = out_dir.join("test");
        std::fs::create_dir_all(&split_dir).unwrap();
        let mut rng = Rng::new(4);
        let write_story = |name: &str, rng: &mut Rng, with_frames: bool| {
            let grids: Vec<TokenGrid> = (0..cfg.n)
                .map(|_| TokenGrid::new(p, (0..p * p).map(|_| rng.below(k) as u16).collect()))
                .collect();
            save_token_sequences(&split_dir.join(format!("{name}.tokens.json")), &grids).unwrap();
            if with_frames {
                let frames_dir = split_dir.join(name);
                std::fs::create_dir_all(&frames_dir).unwrap();
                for i in 0..cfg.n {
                    let chw: Vec<f32> = (0..3 * cfg.h * cfg.w).map(|_| rng.uniform()).collect();
                    crate::dataset::save_image(
                        &frames_dir.join(format!("frame_{i}.png")),
                        &crate::dataset::Image::from_chw(cfg.h, cfg.w, &chw),
                    )
                    .unwrap();
                }
            }
        };

        // Story 0 complete, story 1 absent, story 2 tokens-only.
        write_story("00000", &mut rng, true);
        write_story("00002", &mut rng, false);
        match load_outputs(&out_dir, &manifest, "test", p, k) {
            Err(EvalError::MissingOutputs(ids)) => {
                assert_eq!(ids, vec!["samples/test/00001", "samples/test/00002"]);
            }
            other => panic!("expected MissingOutputs, got {other:?}"),
        }

        write_story("00001", &mut rng, true);
        write_story("00002", &mut rng, true);
        let outputs = load_outputs(&out_dir, &manifest, "test", p, k).unwrap();
        assert_eq!(outputs.len(), 3);
        for story in &outputs {
            assert_eq!(story.grids.len(), cfg.n);
            assert_eq!(story.frames.len(), cfg.n);
            assert!(story.frames.iter().all(|f| f.len() == 3 * cfg.h * cfg.w));
            assert!(story.grids.iter().all(|g| g.flatten().iter().all(|&t| (t as usize) < k)));
        }

        assert!(matches!(
            load_outputs(&out_dir, &manifest, "dev", p, k),
            Err(EvalError::Malformed(_))
        ));
    }
}
