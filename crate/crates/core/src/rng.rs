//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream addressed by a master
//! seed plus a short path of counters, e.g. `(seed, DOMAIN_CHAIN, chain, step)`.
//! The path is hashed with SplitMix64 into a ChaCha8 key, so a stream can be
//! regenerated in isolation without replaying anything that came before it.
//! Chains, minibatch samples and GRPO groups are therefore replayable and can
//! be evaluated in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Stream domains, so that e.g. chain 3 of a sampler never aliases sample 3 of a minibatch.
pub mod domain {
    pub const CHAIN: u64 = 0x01;
    pub const PRETRAIN_PROX: u64 = 0x02;
    pub const PRETRAIN_SCORE: u64 = 0x03;
    pub const INIT: u64 = 0x04;
    pub const GRPO_ROLLOUT: u64 = 0x05;
    pub const TARGET_SAMPLES: u64 = 0x06;
    pub const SUBSAMPLE: u64 = 0x07;
    pub const CHECK: u64 = 0x08;
    pub const SWEEP: u64 = 0x09;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Opens the stream addressed by `seed` and `path`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for (i, &p) in path.iter().enumerate() {
        h = splitmix64(h ^ splitmix64(p.wrapping_add((i as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93))));
    }
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// A 64-bit seed for a sub-experiment, drawn from the stream at `path`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    use rand::RngCore;
    stream(seed, path).next_u64()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| normal(rng)).collect()
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

pub fn index<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    rng.random_range(0..n)
}
