//! Deterministic random number generation.
//!
//! Two generators, both built on the splitmix64 finalizer:
//!
//! * [`StreamRng`] — counter-based and splittable. A stream is keyed by
//!   `(seed, label)`; the value at `(step, index)` is a pure function of the
//!   key and the counters, so consuming from one stream never shifts another.
//!   Dropout masks, history-dropout coins, and parameter initialization all
//!   draw from labeled streams.
//! * [`SeqRng`] — a plain sequential splitmix64 state, for shuffles.
//!
//! All draws are bitwise reproducible across platforms: the only float
//! operations are exact integer-to-float conversions and IEEE-defined
//! arithmetic on them.

/// splitmix64 finalizer: full-avalanche mix of a 64-bit word.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string, for turning labels into key material.
#[inline]
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Mix an ordered list of 64-bit fields into one key.
pub fn hash_fields(fields: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &f in fields {
        h = mix64(h ^ mix64(f));
    }
    h
}

/// Counter-based stream keyed by `(seed, label)`.
///
/// `at(step, index)` is a pure function; streams with different labels are
/// statistically independent.
#[derive(Debug, Clone, Copy)]
pub struct StreamRng {
    key: u64,
}

impl StreamRng {
    pub fn new(seed: u64, label: &str) -> Self {
        StreamRng {
            key: mix64(seed ^ mix64(fnv1a(label.as_bytes()))),
        }
    }

    /// Raw 64-bit value at counter position `(step, index)`.
    #[inline]
    pub fn at(&self, step: u64, index: u64) -> u64 {
        mix64(mix64(self.key ^ mix64(step)) ^ mix64(index ^ 0x6a09_e667_f3bc_c909))
    }

    /// Uniform f64 in [0, 1) at `(step, index)`.
    #[inline]
    pub fn uniform(&self, step: u64, index: u64) -> f64 {
        // 53 high bits -> [0,1) with full double precision.
        (self.at(step, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; consumes indices 2k and 2k+1.
    pub fn normal(&self, step: u64, index: u64) -> f64 {
        let u1 = self.uniform(step, 2 * index);
        let u2 = self.uniform(step, 2 * index + 1);
        // Guard u1 = 0 so ln stays finite.
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Sequential splitmix64 generator for shuffles and one-off sampling.
#[derive(Debug, Clone)]
pub struct SeqRng {
    state: u64,
}

impl SeqRng {
    pub fn new(seed: u64, label: &str) -> Self {
        SeqRng {
            state: mix64(seed ^ mix64(fnv1a(label.as_bytes()))),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        mix64(self.state)
    }

    /// Uniform f64 in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) via rejection sampling.
    pub fn bounded(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bounded(0) is meaningless");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let v = self.next_u64();
            if v >= threshold {
                return v % bound;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        if items.len() < 2 {
            return;
        }
        for i in (1..items.len()).rev() {
            let j = self.bounded(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
