//! Microbenchmark for the dense kernels at transformer and VQ-VAE shapes.

use std::time::Instant;
use vpcsv::numeric::kernels;
use vpcsv::numeric::Rng;

fn fill(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.uniform() - 0.5).collect()
}

fn time_gmacs<F: FnMut()>(label: &str, macs_per_call: f64, reps: usize, mut f: F) {
    f(); // warmup
    let t0 = Instant::now();
    for _ in 0..reps {
        f();
    }
    let dt = t0.elapsed().as_secs_f64();
    let gmacs = macs_per_call * reps as f64 / dt / 1e9;
    println!("{label:>32}: {:8.3} ms/call  {gmacs:6.2} GMAC/s", dt * 1e3 / reps as f64);
}

fn main() {
    let mut rng = Rng::new(7).fork("bench");
    let l = 710usize;
    let d = 128usize;
    let ff = 512usize;

    let a = fill(&mut rng, l * d);
    let b = fill(&mut rng, d * d);
    let bf = fill(&mut rng, d * ff);
    let big = fill(&mut rng, l * ff);
    let sq = fill(&mut rng, l * l);
    let mut out = vec![0f32; l * ff.max(l)];
    let mut outd = vec![0f64; d * d];

    time_gmacs("matmul 710x128 * 128x128", (l * d * d) as f64, 50, || {
        kernels::matmul(&a, &b, l, d, d, &mut out[..l * d]);
    });
    time_gmacs("matmul_nt 710x128 * 128x128", (l * d * d) as f64, 50, || {
        kernels::matmul_nt(&a, &b, l, d, d, &mut out[..l * d]);
    });
    time_gmacs("matmul 710x128 * 128x512", (l * d * ff) as f64, 20, || {
        kernels::matmul(&a, &bf, l, d, ff, &mut out[..l * ff]);
    });
    time_gmacs("matmul 710x512 * 512x128", (l * ff * d) as f64, 20, || {
        kernels::matmul(&big, &bf, l, ff, d, &mut out[..l * d]);
    });
    time_gmacs("matmul_nt 710x128 * 710x128", (l * d * l) as f64, 10, || {
        kernels::matmul_nt(&a, &a, l, d, l, &mut out[..l * l]);
    });
    time_gmacs("matmul 710x710 * 710x128", (l * l * d) as f64, 10, || {
        kernels::matmul(&sq, &a, l, l, d, &mut out[..l * d]);
    });
    time_gmacs("mm_tn_acc 710x128^T * 710x128", (l * d * d) as f64, 50, || {
        outd.fill(0.0);
        kernels::matmul_tn_acc(&a, &a, l, d, d, &mut outd);
    });

    // VQ-VAE encoder stage-1 conv: in [3,32,32] -> out [32,16,16], k4 s2 p1
    let x = fill(&mut rng, 3 * 32 * 32);
    let w = fill(&mut rng, 32 * 3 * 4 * 4);
    let mut y = vec![0f32; 32 * 16 * 16];
    let macs = (32 * 16 * 16 * 3 * 4 * 4) as f64;
    time_gmacs("conv2d 3x32x32 -> 32x16x16 k4s2", macs, 500, || {
        kernels::conv2d(&x, &w, 3, 32, 32, 32, 4, 4, 2, 1, &mut y);
    });
    // stage-2 conv: [32,16,16] -> [64,8,8] k4 s2 p1
    let x2 = fill(&mut rng, 32 * 16 * 16);
    let w2 = fill(&mut rng, 64 * 32 * 4 * 4);
    let mut y2 = vec![0f32; 64 * 8 * 8];
    let macs2 = (64 * 8 * 8 * 32 * 4 * 4) as f64;
    time_gmacs("conv2d 32x16x16 -> 64x8x8 k4s2", macs2, 500, || {
        kernels::conv2d(&x2, &w2, 32, 16, 16, 64, 4, 4, 2, 1, &mut y2);
    });
}
