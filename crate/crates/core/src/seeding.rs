//! Portable keyed random streams.
//!
//! Every random decision in the audit (exposure sampling, behaviour, puppet
//! seeds, the simulated world) draws from a [`KeyedRng`]: a ChaCha20 stream
//! whose 256-bit key is the SHA-256 digest of a domain tag and a list of
//! length-prefixed key parts. Bounded integers use rejection sampling on raw
//! 64-bit words and unit floats take the top 53 bits, so the streams do not
//! depend on the `rand` crate's distribution internals and can be reproduced
//! from any language with ChaCha20 and SHA-256.
//!
//! Algorithm identifier: [`SAMPLER_VERSION`].

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub const SAMPLER_VERSION: &str = "chacha20-sha256-fy/v1";

/// One component of a stream key.
#[derive(Debug, Clone, Copy)]
pub enum KeyPart<'a> {
    U64(u64),
    Str(&'a str),
}

impl From<u64> for KeyPart<'_> {
    fn from(v: u64) -> Self {
        KeyPart::U64(v)
    }
}

impl From<u32> for KeyPart<'_> {
    fn from(v: u32) -> Self {
        KeyPart::U64(u64::from(v))
    }
}

impl<'a> From<&'a str> for KeyPart<'a> {
    fn from(v: &'a str) -> Self {
        KeyPart::Str(v)
    }
}

/// Derive a 32-byte key from a tag and parts.
pub fn derive_key(tag: &str, parts: &[KeyPart<'_>]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(SAMPLER_VERSION.as_bytes());
    hasher.update([0u8]);
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    for part in parts {
        match part {
            KeyPart::U64(v) => {
                hasher.update([1u8]);
                hasher.update(v.to_le_bytes());
            }
            KeyPart::Str(s) => {
                hasher.update([2u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
        }
    }
    hasher.finalize().into()
}

/// Derive a 64-bit seed (first 8 key bytes, little endian).
pub fn derive_seed(tag: &str, parts: &[KeyPart<'_>]) -> u64 {
    let key = derive_key(tag, parts);
    u64::from_le_bytes(key[..8].try_into().expect("8 bytes"))
}

pub struct KeyedRng {
    inner: ChaCha20Rng,
}

impl KeyedRng {
    pub fn new(tag: &str, parts: &[KeyPart<'_>]) -> Self {
        Self {
            inner: ChaCha20Rng::from_seed(derive_key(tag, parts)),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..bound`. `bound` must be positive.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below() needs a positive bound");
        // Largest multiple of `bound` that fits; reject above it.
        let zone = u64::MAX - (u64::MAX % bound + 1) % bound;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % bound;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn between(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Uniform float in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform float in `(0, 1]`, safe for logarithms.
    pub fn unit_open(&mut self) -> f64 {
        1.0 - self.unit()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }
}

/// Lazily materialised Fisher–Yates permutation of `0..len`.
///
/// Drawing the first `n` items equals sampling `n` indices without
/// replacement; continuing the permutation yields replacement candidates
/// that never repeat an earlier draw.
pub struct Permutation {
    slots: Vec<usize>,
    next: usize,
    rng: KeyedRng,
}

impl Permutation {
    pub fn new(len: usize, rng: KeyedRng) -> Self {
        Self {
            slots: (0..len).collect(),
            next: 0,
            rng,
        }
    }
}

impl Iterator for Permutation {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let len = self.slots.len();
        if self.next >= len {
            return None;
        }
        let i = self.next;
        let j = i + self.rng.below((len - i) as u64) as usize;
        self.slots.swap(i, j);
        self.next += 1;
        Some(self.slots[i])
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.slots.len() - self.next;
        (left, Some(left))
    }
}
