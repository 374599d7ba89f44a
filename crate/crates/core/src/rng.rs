//! Deterministic random number generation.
//!
//! Every stochastic choice in the engine is drawn from a [`SplitMix64`]
//! generator derived from the run seed through a named stream, so the whole
//! pipeline is a pure function of its configuration.

/// Stream tags used to derive independent generators from one seed.
///
/// Keeping the tags in one place guarantees that, say, the shuffling stream
/// can never collide with the augmentation stream.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const DATA: u64 = 5;
    pub const CHECK: u64 = 6;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const SALT_MULT: u64 = 0xD134_2543_DE82_EF95;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator. Small state, cheap to fork, fully reproducible.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive an independent generator from `seed` and a list of stream tags
    /// (e.g. `[AUGMENT, epoch, batch_index]`). Pure function of its inputs.
    pub fn stream(seed: u64, tags: &[u64]) -> Self {
        let mut state = mix(seed ^ GOLDEN);
        for &tag in tags {
            state = mix(state ^ tag.wrapping_mul(SALT_MULT));
        }
        SplitMix64 { state }
    }

    /// One draw: advances the state exactly once.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision. One draw.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`. One draw.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in the inclusive range `[lo, hi]`. One draw.
    pub fn uniform_int(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        let span = (hi - lo) as u64 + 1;
        lo + (self.next_u64() % span) as i64
    }

    /// Standard normal via Box-Muller. Two draws, no cached second value, so
    /// the draw count per call is fixed.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

/// Kernel-size draw for the pseudo-morphological modules: 3 or 5 with equal
/// probability. Consumes exactly one draw.
pub fn sample_kernel_size(rng: &mut SplitMix64) -> usize {
    if rng.next_u64() >> 63 == 0 {
        3
    } else {
        5
    }
}
