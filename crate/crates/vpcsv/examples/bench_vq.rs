use std::time::Instant;
use vpcsv::numeric::{AdamState, ParamStore, Rng, Tape};
use vpcsv::vqvae::{VqVae, VqVaeConfig};

fn main() {
    let cfg = VqVaeConfig::default();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(1);
    let model = VqVae::init(&mut store, &cfg, 32, 32, &mut rng);
    let mut adam = AdamState::new(&store, cfg.lr);
    let frames: Vec<Vec<f32>> = (0..cfg.batch)
        .map(|_| (0..3 * 32 * 32).map(|_| rng.uniform()).collect())
        .collect();
    // warmup + timed
    for round in 0..3 {
        let t0 = Instant::now();
        let iters = 5;
        for _ in 0..iters {
            let mut tape = Tape::training();
            let mut totals = Vec::new();
            for f in &frames {
                let x = tape.constant(&[3, 32, 32], f.clone());
                let t = model.forward_terms(&mut tape, &store, &x).unwrap();
                totals.push(t.total);
            }
            let mut acc = totals[0].clone();
            for t in &totals[1..] {
                acc = tape.add(&acc, t).unwrap();
            }
            let loss = tape.scale(&acc, 1.0 / frames.len() as f32).unwrap();
            let g = tape.backward(&loss).unwrap();
            adam.step(&mut store, &g).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        println!("round {round}: {:.1} ms/batch-of-{} ({:.2} ms/frame)", dt * 1e3, frames.len(), dt * 1e3 / frames.len() as f64);
    }
}
