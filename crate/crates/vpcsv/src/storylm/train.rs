//! Two-stage training loop: alternating plan / completion batches on a
//! shared transformer, with per-epoch checkpointing and epoch-boundary
//! resume. One-stage variants run completion batches only.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::charmap::{load_plans, CharacterPlan};
use crate::dataset::{load_split, DatasetManifest};
use crate::numeric::{save_params, AdamState, ParamStore, Rng, Tape};
use crate::vqvae::{load_token_sequences, TokenGrid};

use super::model::{plan_loss, stage2_objective, StoryLmModel};
use super::stats::{character_token_stats, union_tokens};
use super::{LmConfig, SequenceLayout, StoryLmError};

/// One training story with every annotation the objectives need.
#[derive(Debug, Clone)]
pub struct LmTrainData {
    /// Paragraph token ids, one inner vec per frame.
    pub stories: Vec<Vec<Vec<u16>>>,
    /// `mentions[s][f][c]`: story s, frame f mentions character c.
    pub mentions: Vec<Vec<Vec<bool>>>,
    /// Tokenized gold frames.
    pub grids: Vec<Vec<TokenGrid>>,
    /// Gold character-region plans.
    pub plans: Vec<Vec<CharacterPlan>>,
}

impl LmTrainData {
    pub fn len(&self) -> usize {
        self.stories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stories.is_empty()
    }
}

/// Derived-file path for one sample: `dir/split/name.suffix`, mirroring the
/// per-split layout of the sample directories so split names cannot collide.
pub fn derived_path(dir: &Path, split: &str, rel: &str, suffix: &str) -> PathBuf {
    let name = Path::new(rel).file_name().unwrap_or_default().to_string_lossy().into_owned();
    dir.join(split).join(format!("{name}.{suffix}"))
}

/// Load one split plus its derived token/plan files. Each sample directory
/// `samples/split/name` pairs with `tokens_dir/split/name.tokens.json` and
/// `plans_dir/split/name.plans.json`.
pub fn load_lm_data(
    root: &Path,
    manifest: &DatasetManifest,
    split: &str,
    tokens_dir: &Path,
    plans_dir: &Path,
    layout: &SequenceLayout,
) -> Result<LmTrainData, StoryLmError> {
    let samples = load_split(root, manifest, split)?;
    let rels = manifest
        .split(split)
        .expect("load_split validated the split name");
    let mut data = LmTrainData {
        stories: Vec::with_capacity(samples.len()),
        mentions: Vec::with_capacity(samples.len()),
        grids: Vec::with_capacity(samples.len()),
        plans: Vec::with_capacity(samples.len()),
    };
    for (sample, rel) in samples.into_iter().zip(rels) {
        let grids = load_token_sequences(
            &derived_path(tokens_dir, split, rel, "tokens.json"),
            layout.p,
            layout.k,
        )?;
        let plans =
            load_plans(&derived_path(plans_dir, split, rel, "plans.json"), layout.p, layout.k)?;
        if sample.story.len() != layout.n {
            return Err(StoryLmError::WrongFrames {
                what: "story paragraphs",
                want: layout.n,
                got: sample.story.len(),
            });
        }
        if grids.len() != layout.n {
            return Err(StoryLmError::WrongFrames {
                what: "token sequences",
                want: layout.n,
                got: grids.len(),
            });
        }
        if plans.len() != layout.n {
            return Err(StoryLmError::WrongFrames {
                what: "plans",
                want: layout.n,
                got: plans.len(),
            });
        }
        data.stories.push(sample.story);
        data.mentions.push(sample.mentions);
        data.grids.push(grids);
        data.plans.push(plans);
    }
    Ok(data)
}

/// Mean per-story losses of one epoch. Stages that did not run report 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmEpochLog {
    pub epoch: usize,
    pub plan_loss: f64,
    pub completion_loss: f64,
    pub alignment_loss: f64,
    /// `plan + completion + λ·alignment` means — the quantity each epoch
    /// actually stepped on, averaged over stories.
    pub total_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LmTrainMeta {
    pub version: u32,
    pub seed: u64,
    pub epochs_done: usize,
    pub cfg: LmConfig,
    pub logs: Vec<LmEpochLog>,
}

fn meta_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    ckpt.with_file_name(name)
}

fn read_meta(path: &Path) -> Result<LmTrainMeta, StoryLmError> {
    let raw = std::fs::read_to_string(path).map_err(|e| StoryLmError::ResumeMeta {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    serde_json::from_str(&raw).map_err(|e| StoryLmError::ResumeMeta {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn write_meta(path: &Path, meta: &LmTrainMeta) -> Result<(), StoryLmError> {
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(path, json).map_err(|e| StoryLmError::ResumeMeta {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Train (or finish training) the story model; the checkpoint at `ckpt`
/// plus its side meta file always describe the newest completed epoch, so
/// an interrupted run resumes from the last epoch boundary.
///
/// With `two_stage` each shuffled batch is stepped twice — once on the plan
/// objective, once on the completion objective — so both stages see every
/// story each epoch. One-stage variants step only the completion objective
/// with an empty plan segment. λ > 0 adds the character-alignment term with
/// target sets built from the training plans.
pub fn train_storylm(
    data: &LmTrainData,
    layout: &SequenceLayout,
    cfg: &LmConfig,
    seed: u64,
    ckpt: &Path,
) -> Result<Vec<LmEpochLog>, StoryLmError> {
    cfg.validate()?;
    let stories = data.len();
    assert!(stories > 0, "training data is empty");
    assert_eq!(data.mentions.len(), stories, "mentions must parallel stories");
    assert_eq!(data.grids.len(), stories, "grids must parallel stories");
    assert_eq!(data.plans.len(), stories, "plans must parallel stories");

    let mut store = ParamStore::new();
    let mut init_rng = Rng::new(seed);
    let model = StoryLmModel::init(&mut store, layout, cfg, &mut init_rng)?;
    let mut adam = AdamState::new(&store, cfg.lr);

    // T = ∪ t_c over story-mentioned characters, from gold training plans.
    let t_sets: Vec<Vec<u16>> = if cfg.lambda > 0.0 {
        let chars = data.mentions[0][0].len();
        let stats = character_token_stats(&data.mentions, &data.plans, chars, cfg.stats_k)?;
        data.mentions
            .iter()
            .map(|frames| {
                let mentioned: Vec<bool> =
                    (0..chars).map(|c| frames.iter().any(|f| f[c])).collect();
                union_tokens(&stats, &mentioned)
            })
            .collect()
    } else {
        vec![Vec::new(); stories]
    };

    let meta_file = meta_path(ckpt);
    let mut logs: Vec<LmEpochLog> = Vec::new();
    let mut start_epoch = 0;
    if meta_file.exists() {
        let meta = read_meta(&meta_file)?;
        // Everything but the epoch budget must match — raising `epochs`
        // on an existing run is exactly what resume is for.
        let comparable = LmConfig { epochs: cfg.epochs, ..meta.cfg.clone() };
        if meta.seed != seed || comparable != *cfg {
            return Err(StoryLmError::ResumeMeta {
                path: meta_file.display().to_string(),
                detail: "existing run used a different seed or config".into(),
            });
        }
        crate::numeric::load_params(ckpt, &mut store, Some(&mut adam))?;
        start_epoch = meta.epochs_done;
        logs = meta.logs;
    }

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..stories).collect();
        let mut shuffle_rng = Rng::new(seed).fork("lm-epoch").fork_index(epoch as u64);
        shuffle_rng.shuffle(&mut order);
        let drop_base = Rng::new(seed).fork("lm-dropout").fork_index(epoch as u64);

        let (mut plan_sum, mut completion_sum, mut alignment_sum) = (0.0f64, 0.0f64, 0.0f64);
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            if cfg.two_stage {
                let mut tape = Tape::training();
                let mut losses = Vec::with_capacity(chunk.len());
                for (bi, &si) in chunk.iter().enumerate() {
                    let mut drop_rng =
                        drop_base.fork_index(step as u64).fork_index(bi as u64).fork("plan");
                    let loss = plan_loss(
                        &mut tape,
                        &model,
                        &store,
                        layout,
                        &data.stories[si],
                        &data.plans[si],
                        Some(&mut drop_rng),
                    )?;
                    plan_sum += loss.scalar() as f64;
                    losses.push(loss);
                }
                step_batch(&mut tape, &mut store, &mut adam, losses, epoch, step)?;
            }

            let mut tape = Tape::training();
            let mut losses = Vec::with_capacity(chunk.len());
            for (bi, &si) in chunk.iter().enumerate() {
                let mut drop_rng =
                    drop_base.fork_index(step as u64).fork_index(bi as u64).fork("completion");
                let plans: &[CharacterPlan] =
                    if cfg.two_stage { &data.plans[si] } else { &[] };
                let parts = stage2_objective(
                    &mut tape,
                    &model,
                    &store,
                    layout,
                    &data.stories[si],
                    plans,
                    &data.grids[si],
                    &t_sets[si],
                    cfg.lambda,
                    Some(&mut drop_rng),
                )?;
                completion_sum += parts.completion as f64;
                alignment_sum += parts.alignment as f64;
                losses.push(parts.total);
            }
            step_batch(&mut tape, &mut store, &mut adam, losses, epoch, step)?;
            step += 1;
        }

        let n = stories as f64;
        let log = LmEpochLog {
            epoch,
            plan_loss: plan_sum / n,
            completion_loss: completion_sum / n,
            alignment_loss: alignment_sum / n,
            total_loss: (plan_sum + completion_sum + cfg.lambda as f64 * alignment_sum) / n,
        };
        logs.push(log);
        save_params(ckpt, &store, Some(&adam))?;
        write_meta(
            &meta_file,
            &LmTrainMeta {
                version: 1,
                seed,
                epochs_done: epoch + 1,
                cfg: cfg.clone(),
                logs: logs.clone(),
            },
        )?;
    }
    Ok(logs)
}

/// Average the per-story losses, verify finiteness, backprop, Adam-step.
fn step_batch(
    tape: &mut Tape,
    store: &mut ParamStore,
    adam: &mut AdamState,
    losses: Vec<crate::numeric::Value>,
    epoch: usize,
    step: usize,
) -> Result<(), StoryLmError> {
    let mut acc = losses[0].clone();
    for l in &losses[1..] {
        acc = tape.add(&acc, l)?;
    }
    let loss = tape.scale(&acc, 1.0 / losses.len() as f32)?;
    let loss_val = loss.scalar();
    if !loss_val.is_finite() {
        return Err(StoryLmError::Diverged {
            epoch,
            step,
            detail: format!("batch loss = {loss_val}"),
        });
    }
    let grads = tape.backward(&loss)?;
    adam.step(store, &grads).map_err(|e| StoryLmError::Diverged {
        epoch,
        step,
        detail: e.to_string(),
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::decode::{
        generate_baseline, generate_completion, generate_plan, DecodeConfig, Inference,
    };
    use super::super::model::completion_loss;
    use super::*;
    use crate::numeric::load_params;

    /// One fixed story in a tiny geometry the model can memorize quickly.
    fn tiny_problem() -> (SequenceLayout, Vec<Vec<u16>>, Vec<CharacterPlan>, Vec<TokenGrid>) {
        let layout = SequenceLayout::new(6, 5, 2, 2, 4);
        let story = vec![vec![0, 3, 1], vec![4, 2]];
        let plans = vec![
            CharacterPlan::new(2, vec![Some(1), None, None, Some(4)]),
            CharacterPlan::new(2, vec![None, Some(2), Some(2), None]),
        ];
        let grids = vec![
            TokenGrid::new(2, vec![1, 0, 3, 4]),
            TokenGrid::new(2, vec![0, 2, 2, 3]),
        ];
        (layout, story, plans, grids)
    }

    fn tiny_data(
        story: &[Vec<u16>],
        plans: &[CharacterPlan],
        grids: &[TokenGrid],
    ) -> LmTrainData {
        LmTrainData {
            stories: vec![story.to_vec()],
            mentions: vec![vec![vec![true, false], vec![false, true]]],
            grids: vec![grids.to_vec()],
            plans: vec![plans.to_vec()],
        }
    }

    fn tiny_cfg(two_stage: bool, lambda: f32, epochs: usize) -> LmConfig {
        LmConfig {
            d: 32,
            layers: 1,
            heads: 2,
            ff: 64,
            dropout: 0.0,
            lr: 3e-3,
            epochs,
            batch: 1,
            lambda,
            two_stage,
            stats_k: 3,
        }
    }

    /// A single story must be memorized: greedy decoding reproduces the gold
    /// plan and the gold token grids for the two-stage variant, and the gold
    /// grids for the one-stage baseline.
    #[test]
    fn overfits_one_story_and_reproduces_it_greedily() {
        let (layout, story, plans, grids) = tiny_problem();
        let data = tiny_data(&story, &plans, &grids);
        let dir = tempfile::tempdir().unwrap();

        let cfg = tiny_cfg(true, 0.0, 300);
        let ckpt = dir.path().join("two_stage.ckpt");
        let logs = train_storylm(&data, &layout, &cfg, 7, &ckpt).unwrap();
        let first = &logs[0];
        let last = logs.last().unwrap();
        assert!(
            last.completion_loss < 0.05,
            "completion loss stuck at {}",
            last.completion_loss
        );
        assert!(last.plan_loss < 0.05, "plan loss stuck at {}", last.plan_loss);
        assert!(last.total_loss < first.total_loss / 10.0, "training barely moved");

        let mut store = ParamStore::new();
        let mut rng = Rng::new(7);
        let model = StoryLmModel::init(&mut store, &layout, &cfg, &mut rng).unwrap();
        load_params(&ckpt, &mut store, None).unwrap();
        let inf = Inference::new(&model, &store);
        let greedy = DecodeConfig::default();
        assert_eq!(generate_plan(&inf, &layout, &story, &greedy).unwrap(), plans);
        assert_eq!(
            generate_completion(&inf, &layout, &story, &plans, &greedy).unwrap(),
            grids
        );

        let base_cfg = tiny_cfg(false, 0.0, 300);
        let base_ckpt = dir.path().join("baseline.ckpt");
        let base_logs = train_storylm(&data, &layout, &base_cfg, 7, &base_ckpt).unwrap();
        assert_eq!(base_logs.last().unwrap().plan_loss, 0.0, "baseline has no plan stage");
        let mut base_store = ParamStore::new();
        let mut base_rng = Rng::new(7);
        let base_model =
            StoryLmModel::init(&mut base_store, &layout, &base_cfg, &mut base_rng).unwrap();
        load_params(&base_ckpt, &mut base_store, None).unwrap();
        let base_inf = Inference::new(&base_model, &base_store);
        assert_eq!(generate_baseline(&base_inf, &layout, &story, &greedy).unwrap(), grids);
    }

    /// Loss must trend down; compare first-quarter and last-quarter means so
    /// step-to-step noise cannot flake the test.
    #[test]
    fn losses_trend_downward() {
        let (layout, story, plans, grids) = tiny_problem();
        let data = tiny_data(&story, &plans, &grids);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(true, 0.1, 80);
        let logs = train_storylm(&data, &layout, &cfg, 3, &dir.path().join("lm.ckpt")).unwrap();
        assert_eq!(logs.len(), 80);
        let quarter = logs.len() / 4;
        let mean = |s: &[LmEpochLog]| {
            s.iter().map(|l| l.total_loss).sum::<f64>() / s.len() as f64
        };
        let head = mean(&logs[..quarter]);
        let tail = mean(&logs[logs.len() - quarter..]);
        assert!(tail < head, "total loss rose: first-quarter {head} vs last-quarter {tail}");
    }

    /// Same seed, same data → byte-identical checkpoints.
    #[test]
    fn same_seed_gives_byte_identical_checkpoints() {
        let (layout, story, plans, grids) = tiny_problem();
        let data = tiny_data(&story, &plans, &grids);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(true, 0.1, 3);
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        train_storylm(&data, &layout, &cfg, 11, &a).unwrap();
        train_storylm(&data, &layout, &cfg, 11, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    /// λ = 0 must not change the optimization problem: the objective the
    /// loop steps on IS the completion loss, bit for bit.
    #[test]
    fn lambda_zero_objective_is_completion_loss_bitwise() {
        let (layout, story, plans, grids) = tiny_problem();
        let cfg = tiny_cfg(true, 0.0, 1);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let model = StoryLmModel::init(&mut store, &layout, &cfg, &mut rng).unwrap();

        let mut tape = Tape::new();
        let parts = stage2_objective(
            &mut tape, &model, &store, &layout, &story, &plans, &grids, &[1, 2], 0.0, None,
        )
        .unwrap();
        let plain =
            completion_loss(&mut tape, &model, &store, &layout, &story, &plans, &grids, None)
                .unwrap();
        assert_eq!(parts.total.scalar().to_bits(), plain.scalar().to_bits());
    }

    /// Resume from the epoch boundary must agree with an uninterrupted run.
    #[test]
    fn resume_matches_uninterrupted_run() {
        let (layout, story, plans, grids) = tiny_problem();
        let data = tiny_data(&story, &plans, &grids);
        let dir = tempfile::tempdir().unwrap();

        let full_cfg = tiny_cfg(true, 0.1, 4);
        let full = dir.path().join("full.ckpt");
        train_storylm(&data, &layout, &full_cfg, 13, &full).unwrap();

        let half_cfg = tiny_cfg(true, 0.1, 2);
        let resumed = dir.path().join("resumed.ckpt");
        train_storylm(&data, &layout, &half_cfg, 13, &resumed).unwrap();
        // Same seed and shape, more epochs: continues where epoch 2 left off.
        let logs = train_storylm(&data, &layout, &full_cfg, 13, &resumed).unwrap();
        assert_eq!(logs.len(), 4);
        assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&resumed).unwrap());

        let other_cfg = LmConfig { lr: 9e-4, ..full_cfg };
        assert!(matches!(
            train_storylm(&data, &layout, &other_cfg, 13, &resumed),
            Err(StoryLmError::ResumeMeta { .. })
        ));
    }

    /// End-to-end file loading: dataset sample dirs + derived token/plan
    /// files named after each sample.
    #[test]
    fn load_lm_data_joins_samples_with_derived_files() {
        use crate::charmap::save_plans;
        use crate::dataset::{generate_dataset, DatasetConfig};
        use crate::vqvae::save_token_sequences;

        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let ds_cfg = DatasetConfig { train: 3, val: 1, test: 1, ..DatasetConfig::default() };
        let manifest = generate_dataset(root, &ds_cfg, 42).unwrap();

        let layout = SequenceLayout::new(39, 6, manifest.n, 2, 12);
        let tokens_dir = root.join("tokens");
        let plans_dir = root.join("plans");
        std::fs::create_dir_all(tokens_dir.join("train")).unwrap();
        std::fs::create_dir_all(plans_dir.join("train")).unwrap();
        let mut rng = Rng::new(1);
        for rel in manifest.split("train").unwrap() {
            let grids: Vec<TokenGrid> = (0..manifest.n)
                .map(|_| {
                    TokenGrid::new(
                        2,
                        (0..4).map(|_| rng.below(layout.k) as u16).collect(),
                    )
                })
                .collect();
            let plans: Vec<CharacterPlan> = grids
                .iter()
                .map(|g| {
                    CharacterPlan::new(
                        2,
                        g.indices.iter().map(|&i| (rng.below(2) == 0).then_some(i)).collect(),
                    )
                })
                .collect();
            save_token_sequences(&derived_path(&tokens_dir, "train", rel, "tokens.json"), &grids)
                .unwrap();
            save_plans(&derived_path(&plans_dir, "train", rel, "plans.json"), &plans).unwrap();
        }

        let data =
            load_lm_data(root, &manifest, "train", &tokens_dir, &plans_dir, &layout).unwrap();
        assert_eq!(data.len(), 3);
        for s in 0..3 {
            assert_eq!(data.stories[s].len(), manifest.n);
            assert_eq!(data.mentions[s].len(), manifest.n);
            assert_eq!(data.grids[s].len(), manifest.n);
            assert_eq!(data.plans[s].len(), manifest.n);
        }
        // A missing derived file is an error, not a silent skip.
        assert!(load_lm_data(root, &manifest, "val", &tokens_dir, &plans_dir, &layout).is_err());
    }
}
