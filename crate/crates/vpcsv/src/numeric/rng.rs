//! Deterministic counter-based RNG.
//!
//! One global seed drives every stream in the repo. Streams are derived by
//! hashing the parent state with a label (`fork`), so the draw order inside
//! one stream never affects another. This is what makes dataset generation
//! shardable and training runs bit-reproducible.

/// SplitMix64 generator. Cheap, full 64-bit state, passes BigCrush for our
/// purposes (initialization noise, dropout masks, sampling).
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes, used to mix labels into fork seeds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        Rng { state: splitmix64(&mut s) }
    }

    /// Derive an independent stream keyed by a label. Forking does not
    /// advance this generator, so fork order is free to change.
    pub fn fork(&self, label: &str) -> Rng {
        Rng::new(self.state ^ fnv1a(label.as_bytes()))
    }

    /// Derive an independent stream keyed by an index (per-sample sub-seeds).
    pub fn fork_index(&self, index: u64) -> Rng {
        Rng::new(self.state ^ fnv1a(&index.to_le_bytes()) ^ 0x5851_f42d_4c95_7f2d)
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Rng {
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f32 {
        // 24 high bits -> exactly representable in f32
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        let u1 = (self.uniform() as f64).max(1e-12);
        let u2 = self.uniform() as f64;
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// k distinct values drawn from [0, n).
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        self.shuffle(&mut pool);
        pool.truncate(k);
        pool
    }

    /// Sample an index from unnormalized non-negative weights.
    pub fn weighted(&mut self, weights: &[f32]) -> usize {
        let total: f64 = weights.iter().map(|&w| w as f64).sum();
        let mut target = self.uniform() as f64 * total;
        for (i, &w) in weights.iter().enumerate() {
            target -= w as f64;
            if target < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
