//! Deterministic pseudo-random streams.
//!
//! Every random choice in the pipeline draws from a splitmix64 stream keyed
//! by a `(seed, purpose tag)` pair. Keyed streams keep subsystems from
//! disturbing each other's draws, so adding a consumer never shifts the
//! randomness seen elsewhere, and every run is reproducible from its seeds
//! on any platform.

/// splitmix64 generator.
///
/// State update: `s += 0x9E3779B97F4A7C15`; output: two xor-multiply mixing
/// rounds of the new state. Keyed construction: the purpose tag is hashed
/// with FNV-1a (64-bit), xored into the seed, and one warm-up output is
/// discarded.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Stream keyed by `(seed, tag)`.
    pub fn keyed(seed: u64, tag: &str) -> Self {
        let mut rng = SplitMix64 {
            state: seed ^ fnv1a(tag.as_bytes()),
        };
        rng.next_u64();
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` via 128-bit multiply-shift. `n` must be > 0.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Bernoulli(1/2).
    pub fn next_bool(&mut self) -> bool {
        self.next_f64() < 0.5
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Beta(alpha, alpha) via Johnk's rejection method; valid for 0 < alpha <= 1.
    pub fn next_beta_symmetric(&mut self, alpha: f64) -> f64 {
        debug_assert!(alpha > 0.0 && alpha <= 1.0);
        let inv = 1.0 / alpha;
        loop {
            let x = self.next_f64().powf(inv);
            let y = self.next_f64().powf(inv);
            let s = x + y;
            if s > 0.0 && s <= 1.0 {
                return x / s;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
