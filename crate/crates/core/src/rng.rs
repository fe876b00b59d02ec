//! Counter-based splittable random stream.
//!
//! Every draw is a pure function of `(key, counter)`, so a stream is
//! reproducible from its seed on any platform, and substreams derived from
//! distinct tag paths have distinct keys and therefore disjoint sequences.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Identifies the generator so checkpointed experiments can assert they were
/// produced by the same draw algorithm.
pub const ALGORITHM: &str = "splitmix64-ctr-v1";

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        RngStream {
            key: mix64(seed ^ 0x6469_7662_6f6f_7374), // domain constant
            counter: 0,
        }
    }

    /// Derive an independent stream keyed by a tag path, e.g.
    /// `(epoch, batch, class)`. The parent is not advanced.
    pub fn substream(&self, tags: &[u64]) -> Self {
        let mut key = self.key;
        for &tag in tags {
            key = mix64(key.wrapping_add(GAMMA) ^ mix64(tag.wrapping_add(GAMMA)));
        }
        RngStream { key, counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// `p = 0` never fires, `p = 1` always fires.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform index in `[0, n)`. `n` must be nonzero.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn int_in(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        lo + self.index((hi - lo + 1) as usize) as i64
    }

    /// Standard normal via Box-Muller; consumes two draws.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
