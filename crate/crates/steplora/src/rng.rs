//! Counter-based pseudo-random generator.
//!
//! Every draw is a pure function of `(key, counter)`, so the full generator
//! state is two u64 words. That keeps checkpointed runs resumable and makes
//! fixed-seed replays bit-identical regardless of how the stream was
//! consumed. Child streams are derived by mixing a label into the key.

use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(key: u64, counter: u64) -> u64 {
    // splitmix64 finalizer over the (key, counter) pair
    let mut z = counter.wrapping_mul(GOLDEN).wrapping_add(key);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Serializable generator state, stored verbatim in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub key: u64,
    pub counter: u64,
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn seed(seed: u64) -> Self {
        Self {
            key: mix(GOLDEN, seed),
            counter: 0,
        }
    }

    /// Independent child stream identified by `label`. Children of the same
    /// parent state with distinct labels never collide.
    pub fn derive(&self, label: &str) -> Self {
        Self {
            key: mix(self.key ^ label_hash(label), 0x5851_F42D_4C95_7F2D),
            counter: 0,
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            key: self.key,
            counter: self.counter,
        }
    }

    pub fn restore(state: RngState) -> Self {
        Self {
            key: state.key,
            counter: state.counter,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Lemire's multiply-shift; the modulo bias of
    /// a plain remainder would be negligible here, but this is exact.
    pub fn range(&mut self, n: u64) -> u64 {
        assert!(n > 0, "range bound must be positive");
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call and
    /// discards the second branch so the state stays a plain counter.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        // u1 = 0 would send ln to -inf; nudge to the smallest representable draw
        let u1 = if u1 <= 0.0 { f64::MIN_POSITIVE } else { u1 };
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }
}
