//! Deterministic, counter-seedable random number generation.
//!
//! Every random decision in the pipeline flows from one root seed, fanned
//! out through [`mix`] with per-stage tags (stage id, scene index, frame
//! index, pixel index, ...). Each work item gets its own generator, so
//! parallel and serial execution draw identical values. The generator is
//! implemented here rather than pulled from a crate so that streams are
//! stable against dependency upgrades.

/// Stage tags for seed fan-out. Values are arbitrary but fixed forever.
pub mod stage {
    pub const SCENE: u64 = 0x01;
    pub const FRAME: u64 = 0x02;
    pub const ELASTIC: u64 = 0x03;
    pub const SAMPLE: u64 = 0x04;
    pub const PROTOTYPE: u64 = 0x05;
    pub const PIXEL: u64 = 0x06;
    pub const STUDENT_INIT: u64 = 0x07;
    pub const TRAIN: u64 = 0x08;
    pub const AUGMENT: u64 = 0x09;
    pub const KMEANS: u64 = 0x0a;
    pub const PROBE: u64 = 0x0b;
    pub const EVAL_SCENE: u64 = 0x0c;
}

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output function; the workhorse for seed mixing.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a list of tags.
///
/// Order-sensitive: `mix(s, &[a, b]) != mix(s, &[b, a])` in general.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(seed);
    for (i, &t) in tags.iter().enumerate() {
        state = splitmix64(state ^ t.wrapping_add((i as u64 + 1).wrapping_mul(GAMMA)));
    }
    state
}

/// PCG XSH-RR 64/32, with two independently seeded 32-bit draws combined
/// into each 64-bit output. Small, fast, and well distributed.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    inc: u64,
}

const PCG_MULT: u64 = 6_364_136_223_846_793_005;

impl Rng {
    pub fn new(seed: u64) -> Self {
        let inc = (splitmix64(seed ^ 0xda3e_39cb_94b9_5bdb) << 1) | 1;
        let mut rng = Rng { state: 0, inc };
        rng.state = rng.state.wrapping_mul(PCG_MULT).wrapping_add(inc);
        rng.state = rng.state.wrapping_add(splitmix64(seed));
        rng.state = rng.state.wrapping_mul(PCG_MULT).wrapping_add(inc);
        rng
    }

    /// Convenience: generator for `mix(seed, tags)`.
    pub fn from_stream(seed: u64, tags: &[u64]) -> Self {
        Self::new(mix(seed, tags))
    }

    #[inline]
    fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(PCG_MULT).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let hi = self.next_u32() as u64;
        let lo = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / ((1u64 << 53) as f64))
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased uniform integer in [0, n). Panics if n == 0.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // Lemire-style rejection to remove modulo bias.
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % n;
            }
        }
    }

    /// Standard normal via Box-Muller. Draws two uniforms per value; the
    /// sibling value is discarded to keep the stream position independent
    /// of call parity.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u1 = self.uniform();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            return r * (std::f64::consts::TAU * u2).cos();
        }
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        let n = items.len();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Samples an index with probability proportional to `weights[i]`.
    /// Weights must be nonnegative with a positive sum.
    pub fn choose_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "choose_weighted: nonpositive total weight");
        let target = self.uniform() * total;
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        weights.len() - 1
    }
}
