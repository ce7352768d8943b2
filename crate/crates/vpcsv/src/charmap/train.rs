//! Classifier training on per-frame mention labels, with per-class
//! precision/recall and subset-accuracy logging against the validation split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_split, DatasetManifest, StorySample};
use crate::numeric::{save_params, AdamState, ParamStore, Rng, Tape};

use super::model::{ids_from_logits, Classifier};
use super::{CharMapConfig, CharMapError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassPr {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClsEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_subset_accuracy: f64,
    pub per_class: Vec<ClassPr>,
}

/// CHW frames and multi-hot label rows for every frame of a split.
pub fn frames_and_labels(samples: &[StorySample], c: usize) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        for (frame, mentions) in s.frames.iter().zip(&s.mentions) {
            assert_eq!(mentions.len(), c);
            frames.push(frame.to_chw());
            labels.push(mentions.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        }
    }
    (frames, labels)
}

/// Subset accuracy (exact set match) and per-class precision/recall at
/// `threshold`. Empty denominators count as perfect (vacuously correct).
pub fn eval_split(
    model: &Classifier,
    store: &ParamStore,
    frames: &[Vec<f32>],
    labels: &[Vec<f32>],
    threshold: f32,
) -> Result<(f64, Vec<ClassPr>), CharMapError> {
    let c = model.c;
    let (mut tp, mut fp, mut fnn) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    let mut exact = 0usize;
    for (frame, label) in frames.iter().zip(labels) {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, model.h, model.w], frame.clone());
        let out = model.forward(&mut tape, store, &x)?;
        let predicted = ids_from_logits(out.logits.data(), threshold);
        let truth: Vec<usize> =
            label.iter().enumerate().filter(|(_, &l)| l > 0.5).map(|(i, _)| i).collect();
        if predicted == truth {
            exact += 1;
        }
        for k in 0..c {
            let p = predicted.contains(&k);
            let t = truth.contains(&k);
            match (p, t) {
                (true, true) => tp[k] += 1,
                (true, false) => fp[k] += 1,
                (false, true) => fnn[k] += 1,
                (false, false) => {}
            }
        }
    }
    let per_class = (0..c)
        .map(|k| ClassPr {
            precision: if tp[k] + fp[k] == 0 { 1.0 } else { tp[k] as f64 / (tp[k] + fp[k]) as f64 },
            recall: if tp[k] + fnn[k] == 0 { 1.0 } else { tp[k] as f64 / (tp[k] + fnn[k]) as f64 },
        })
        .collect();
    Ok((exact as f64 / frames.len() as f64, per_class))
}

/// Train the classifier on the train split's mention labels; evaluates the
/// validation split each epoch and saves the final parameters to `ckpt`.
pub fn train_classifier(
    root: &Path,
    manifest: &DatasetManifest,
    cfg: &CharMapConfig,
    seed: u64,
    ckpt: &Path,
) -> Result<Vec<ClsEpochLog>, CharMapError> {
    let c = manifest.c;
    let train = load_split(root, manifest, "train")?;
    let val = load_split(root, manifest, "val")?;
    let (frames, labels) = frames_and_labels(&train, c);
    let (val_frames, val_labels) = frames_and_labels(&val, c);
    assert!(!frames.is_empty(), "training split is empty");

    let mut store = ParamStore::new();
    let mut init_rng = Rng::new(seed);
    let model = Classifier::init(&mut store, cfg, c, manifest.h, manifest.w, &mut init_rng);
    let mut adam = AdamState::new(&store, cfg.lr);

    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        let mut rng = Rng::new(seed).fork("charmap-epoch").fork_index(epoch as u64);
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut tape = Tape::training();
            let mut losses = Vec::with_capacity(chunk.len());
            for &fi in chunk {
                let x = tape.constant(&[3, model.h, model.w], frames[fi].clone());
                let l = model.loss(&mut tape, &store, &x, &labels[fi])?;
                loss_sum += l.scalar() as f64;
                losses.push(l);
            }
            let mut acc = losses[0].clone();
            for l in &losses[1..] {
                acc = tape.add(&acc, l)?;
            }
            let loss = tape.scale(&acc, 1.0 / chunk.len() as f32)?;
            if !loss.scalar().is_finite() {
                return Err(CharMapError::Diverged {
                    epoch,
                    step,
                    detail: format!("batch loss = {}", loss.scalar()),
                });
            }
            let grads = tape.backward(&loss)?;
            adam.step(&mut store, &grads).map_err(|e| CharMapError::Diverged {
                epoch,
                step,
                detail: e.to_string(),
            })?;
        }

        let (acc, per_class) =
            eval_split(&model, &store, &val_frames, &val_labels, cfg.threshold)?;
        logs.push(ClsEpochLog {
            epoch,
            train_loss: loss_sum / frames.len() as f64,
            val_subset_accuracy: acc,
            per_class,
        });
    }
    save_params(ckpt, &store, None)?;
    Ok(logs)
}
