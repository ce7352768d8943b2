//! Scratch run: default dataset + default VQ-VAE training, prints epoch logs.
use std::path::Path;
use vpcsv::dataset::{generate_dataset, load_manifest, DatasetConfig};
use vpcsv::vqvae::{train_vqvae, VqVaeConfig};

fn main() {
    let root = Path::new("/tmp/vpcsv-scratch/data");
    let manifest = if root.join("manifest.json").exists() {
        load_manifest(root).unwrap()
    } else {
        std::fs::create_dir_all(root).unwrap();
        let t0 = std::time::Instant::now();
        let m = generate_dataset(root, &DatasetConfig::default(), 1).unwrap();
        println!("dataset generated in {:.1}s", t0.elapsed().as_secs_f64());
        m
    };
    let cfg = VqVaeConfig { epochs: 10, ..VqVaeConfig::default() };
    let ckpt = Path::new("/tmp/vpcsv-scratch/vq.ckpt");
    let t0 = std::time::Instant::now();
    let logs = train_vqvae(root, &manifest, &cfg, 11, ckpt).unwrap();
    for l in &logs {
        println!(
            "epoch {}: recon {:.5} codebook {:.5} commit {:.5} total {:.5} usage {:.2}",
            l.epoch, l.recon, l.codebook, l.commit, l.total, l.usage
        );
    }
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
}
