//! Adam training loop over single frames with per-epoch checkpointing and
//! epoch-boundary resume.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_split, DatasetManifest};
use crate::numeric::{load_params, save_params, AdamState, ParamStore, Rng, Tape};

use super::model::VqVae;
use super::{VqVaeConfig, VqVaeError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqEpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
    /// Fraction of codebook entries selected at least once this epoch.
    pub usage: f64,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    version: u32,
    seed: u64,
    epochs_done: usize,
    cfg: VqVaeConfig,
    logs: Vec<VqEpochLog>,
}

fn meta_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    ckpt.with_file_name(name)
}

fn read_meta(path: &Path) -> Result<TrainMeta, VqVaeError> {
    let raw = std::fs::read_to_string(path).map_err(|e| VqVaeError::ResumeMeta {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    serde_json::from_str(&raw).map_err(|e| VqVaeError::ResumeMeta {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn write_meta(path: &Path, meta: &TrainMeta) -> Result<(), VqVaeError> {
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(path, json).map_err(|e| VqVaeError::ResumeMeta {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Train (or finish training) the tokenizer; the checkpoint at `ckpt` plus
/// its side meta file always describe the newest completed epoch, so an
/// interrupted run resumes from the last epoch boundary. Returns the full
/// per-epoch log, including epochs restored from an earlier run.
pub fn train_vqvae(
    root: &Path,
    manifest: &DatasetManifest,
    cfg: &VqVaeConfig,
    seed: u64,
    ckpt: &Path,
) -> Result<Vec<VqEpochLog>, VqVaeError> {
    let samples = load_split(root, manifest, "train")?;
    let frames: Vec<Vec<f32>> =
        samples.iter().flat_map(|s| s.frames.iter().map(|f| f.to_chw())).collect();
    assert!(!frames.is_empty(), "training split is empty");

    let mut store = ParamStore::new();
    let mut init_rng = Rng::new(seed);
    let model = VqVae::init(&mut store, cfg, manifest.h, manifest.w, &mut init_rng);
    let mut adam = AdamState::new(&store, cfg.lr);

    let meta_file = meta_path(ckpt);
    let mut logs: Vec<VqEpochLog> = Vec::new();
    let mut start_epoch = 0;
    if meta_file.exists() {
        let meta = read_meta(&meta_file)?;
        let same = meta.seed == seed
            && meta.cfg.k == cfg.k
            && meta.cfg.d == cfg.d
            && meta.cfg.beta == cfg.beta
            && meta.cfg.lr == cfg.lr
            && meta.cfg.batch == cfg.batch;
        if !same {
            return Err(VqVaeError::ResumeMeta {
                path: meta_file.display().to_string(),
                detail: "existing run used a different seed or config".into(),
            });
        }
        load_params(ckpt, &mut store, Some(&mut adam))?;
        start_epoch = meta.epochs_done;
        logs = meta.logs;
    }

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        let mut shuffle_rng = Rng::new(seed).fork("vqvae-epoch").fork_index(epoch as u64);
        shuffle_rng.shuffle(&mut order);

        let mut used = vec![false; cfg.k];
        let (mut recon_sum, mut codebook_sum, mut commit_sum, mut total_sum) =
            (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut step = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::training();
            let mut batch_totals = Vec::with_capacity(chunk.len());
            for &fi in chunk {
                let x = tape.constant(&[3, manifest.h, manifest.w], frames[fi].clone());
                let terms = model.forward_terms(&mut tape, &store, &x)?;
                recon_sum += terms.recon.scalar() as f64;
                codebook_sum += terms.codebook.scalar() as f64;
                commit_sum += terms.commit.scalar() as f64;
                total_sum += terms.total.scalar() as f64;
                for &idx in &terms.indices {
                    used[idx as usize] = true;
                }
                batch_totals.push(terms.total);
            }
            let mut acc = batch_totals[0].clone();
            for t in &batch_totals[1..] {
                acc = tape.add(&acc, t)?;
            }
            let loss = tape.scale(&acc, 1.0 / chunk.len() as f32)?;
            let loss_val = loss.scalar();
            if !loss_val.is_finite() {
                return Err(VqVaeError::Diverged {
                    epoch,
                    step,
                    detail: format!("batch loss = {loss_val}"),
                });
            }
            let grads = tape.backward(&loss)?;
            adam.step(&mut store, &grads).map_err(|e| VqVaeError::Diverged {
                epoch,
                step,
                detail: e.to_string(),
            })?;
            step += 1;
        }

        let n = frames.len() as f64;
        logs.push(VqEpochLog {
            epoch,
            recon: recon_sum / n,
            codebook: codebook_sum / n,
            commit: commit_sum / n,
            total: total_sum / n,
            usage: used.iter().filter(|&&u| u).count() as f64 / cfg.k as f64,
        });
        save_params(ckpt, &store, Some(&adam))?;
        write_meta(
            &meta_file,
            &TrainMeta {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetConfig};

    fn tiny_dataset(dir: &Path) -> DatasetManifest {
        let cfg = DatasetConfig { train: 6, val: 2, test: 2, ..DatasetConfig::default() };
        generate_dataset(dir, &cfg, 99).unwrap()
    }

    fn tiny_cfg(epochs: usize) -> VqVaeConfig {
        VqVaeConfig { k: 16, d: 8, epochs, batch: 4, ..VqVaeConfig::default() }
    }

    #[test]
    fn loss_decreases_and_logs_are_complete() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let ckpt = dir.path().join("vq.ckpt");
        let logs = train_vqvae(dir.path(), &manifest, &tiny_cfg(3), 7, &ckpt).unwrap();
        assert_eq!(logs.len(), 3);
        assert!(logs.iter().enumerate().all(|(i, l)| l.epoch == i));
        assert!(
            logs.last().unwrap().recon < logs[0].recon,
            "recon {} → {}",
            logs[0].recon,
            logs.last().unwrap().recon
        );
        assert!(logs.iter().all(|l| l.total.is_finite() && l.usage > 0.0));
        assert!(ckpt.exists() && meta_path(&ckpt).exists());
    }

    #[test]
    fn resume_matches_uninterrupted_run_exactly() {
        let data = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(data.path());

        // Uninterrupted: two epochs in one call.
        let full_dir = tempfile::tempdir().unwrap();
        let full_ckpt = full_dir.path().join("vq.ckpt");
        let full = train_vqvae(data.path(), &manifest, &tiny_cfg(2), 41, &full_ckpt).unwrap();

        // Interrupted: one epoch, then extend to two.
        let part_dir = tempfile::tempdir().unwrap();
        let part_ckpt = part_dir.path().join("vq.ckpt");
        let first = train_vqvae(data.path(), &manifest, &tiny_cfg(1), 41, &part_ckpt).unwrap();
        assert_eq!(first.len(), 1);
        let resumed = train_vqvae(data.path(), &manifest, &tiny_cfg(2), 41, &part_ckpt).unwrap();

        assert_eq!(resumed.len(), full.len());
        for (a, b) in resumed.iter().zip(&full) {
            assert_eq!(a.recon, b.recon, "epoch {} recon", a.epoch);
            assert_eq!(a.total, b.total, "epoch {} total", a.epoch);
            assert_eq!(a.usage, b.usage, "epoch {} usage", a.epoch);
        }
        let bytes_full = std::fs::read(&full_ckpt).unwrap();
        let bytes_part = std::fs::read(&part_ckpt).unwrap();
        assert_eq!(bytes_full, bytes_part, "final checkpoints must be byte-identical");
    }

    #[test]
    fn resume_with_mismatched_seed_is_rejected() {
        let data = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(data.path());
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("vq.ckpt");
        train_vqvae(data.path(), &manifest, &tiny_cfg(1), 1, &ckpt).unwrap();
        let err = train_vqvae(data.path(), &manifest, &tiny_cfg(2), 2, &ckpt).unwrap_err();
        assert!(matches!(err, VqVaeError::ResumeMeta { .. }), "{err}");
    }

    #[test]
    fn completed_run_is_a_no_op_on_recall() {
        let data = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(data.path());
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("vq.ckpt");
        let logs = train_vqvae(data.path(), &manifest, &tiny_cfg(2), 5, &ckpt).unwrap();
        let before = std::fs::read(&ckpt).unwrap();
        let again = train_vqvae(data.path(), &manifest, &tiny_cfg(2), 5, &ckpt).unwrap();
        assert_eq!(again.len(), logs.len());
        assert_eq!(again.last().unwrap().total, logs.last().unwrap().total);
        assert_eq!(std::fs::read(&ckpt).unwrap(), before);
    }
}
