//! Deterministic random number generation.
//!
//! All randomness in the pipeline flows from one root seed through named
//! streams. A stream is identified by `(root_seed, purpose_label, index)`;
//! the triple is hashed into a xoshiro256** state, so independent streams can
//! be handed to demo generation, per-epoch training noise, per-episode
//! rollouts, and mask draws without any coordination. The same triple always
//! yields the same byte-for-byte draw sequence on every platform.
//!
//! Generator: xoshiro256** (Blackman & Vigna). Seed expansion and label
//! hashing: splitmix64 over `root ^ fnv1a(label) ^ mix(index)`.

use crate::math;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// xoshiro256** stream.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    /// Expand a 64-bit seed into a full state via splitmix64.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut sm);
        }
        // xoshiro must not start from the all-zero state
        if s == [0, 0, 0, 0] {
            s[0] = 0x9e3779b97f4a7c15;
        }
        Rng { s }
    }

    /// Derive the stream identified by `(root_seed, label, index)`.
    pub fn stream(root_seed: u64, label: &str, index: u64) -> Self {
        let mut sm = root_seed ^ fnv1a(label.as_bytes());
        let mixed = splitmix64(&mut sm) ^ index.wrapping_mul(0xd1342543de82ef95);
        let mut sm2 = mixed;
        let _ = splitmix64(&mut sm2);
        Rng::from_seed(splitmix64(&mut sm2))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift; bias is < 2^-64 * n, irrelevant at desk scale.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch; one normal per pair of
    /// uniforms, no cached spare, so the draw count per call is fixed).
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so ln is finite
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0);
        let u2 = self.uniform();
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * math::PI * u2)
    }

    /// Fill a buffer with standard normal draws.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Fisher-Yates shuffle of index order.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
