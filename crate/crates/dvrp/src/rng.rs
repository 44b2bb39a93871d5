//! Counter-based deterministic random number generation.
//!
//! Every draw is a pure function of (key, counter), so parallel and serial
//! execution produce identical streams and there is no generator state to
//! checkpoint: any point in a run can be reconstructed from the run seed and
//! the structural indices (step, task, group member) it was derived from.
//! Not cryptographically secure.

/// Stream labels used when deriving child seeds. Each structural role gets
/// its own constant so streams never collide.
pub mod stream {
    pub const MASK: u64 = 0x4d41_534b;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const INIT: u64 = 0x494e_4954;
    pub const SAMPLE: u64 = 0x534d_504c;
    pub const TASK: u64 = 0x5441_534b;
    pub const EVAL: u64 = 0x4556_414c;
    pub const MEMBER: u64 = 0x4d45_4d42;
    pub const STEP: u64 = 0x5354_4550;
    pub const BLOB: u64 = 0x424c_4f42;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer: a full-avalanche 64-bit mixer.
#[inline]
fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from a parent seed and a stream/index label.
/// Chain calls to build hierarchical seeds, e.g.
/// `derive(derive(run_seed, stream::TASK), task_index as u64)`.
#[inline]
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix(seed.wrapping_add(GOLDEN).wrapping_add(stream.wrapping_mul(GOLDEN)))
}

/// Counter-based RNG: draw `i` of stream `key` is `mix(key + i * GOLDEN)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key: mix(key), counter: 0 }
    }

    /// Value at an explicit counter, independent of sequential position.
    #[inline]
    pub fn at(&self, counter: u64) -> u64 {
        mix(self.key ^ counter.wrapping_mul(GOLDEN).wrapping_add(GOLDEN))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe to pass to `ln`.
    #[inline]
    pub fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Bernoulli draw with probability `p` of `true`.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller on two counter draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
