//! Keyed random streams.
//!
//! Every generated field draws from its own ChaCha8 stream keyed by
//! `(family, size, seed, tag)`, so adding a field never reshuffles others and
//! output is identical across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_key(family: &str, size: usize, seed: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325;
    h = fnv1a(family.as_bytes(), h);
    h = fnv1a(&[0xff], h);
    h = fnv1a(&(size as u64).to_le_bytes(), h);
    h = fnv1a(&seed.to_le_bytes(), h);
    h = fnv1a(tag.as_bytes(), h);
    splitmix64(h)
}

/// Random source for one field of one instance.
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn new(family: &str, size: usize, seed: u64, tag: &str) -> Self {
        Self(ChaCha8Rng::seed_from_u64(stream_key(
            family, size, seed, tag,
        )))
    }

    pub fn from_seed(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(splitmix64(seed)))
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Random sign, `+1` or `−1` with equal probability.
    pub fn sign(&mut self) -> f64 {
        if self.0.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn normals(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.normal()).collect()
    }

    pub fn uniforms(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.uniform()).collect()
    }

    /// Index in `0..len`.
    pub fn index(&mut self, len: usize) -> usize {
        self.0.random_range(0..len)
    }
}
