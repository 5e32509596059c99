//! Reproducible, splittable random streams.
//!
//! Every source of randomness in the pipeline is an `RngStream` addressed
//! by `(seed, stream_id)`: a ChaCha12 counter-mode generator keyed by the
//! seed, with the stream id as the nonce. Distinct ids give statistically
//! independent sequences, so per-example and per-epoch streams can be
//! derived from path components instead of threading mutable RNG state
//! through the pipeline.
//!
//! Gaussian draws use the Box-Muller transform; the unused half of each
//! pair is cached so that a sequence of draws is independent of how it is
//! chunked into batches.

use crate::error::{Error, Result};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// SplitMix64 finalizer; used to expand seeds and mix path components.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic random stream identified by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha12Rng,
    seed: u64,
    stream_id: u64,
    delivered: u64,
    spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_exact_mut(8) {
            s = mix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut rng = ChaCha12Rng::from_seed(key);
        rng.set_stream(stream_id);
        RngStream {
            rng,
            seed,
            stream_id,
            delivered: 0,
            spare: None,
        }
    }

    /// Derive a stream whose id mixes the given path components, e.g.
    /// `(seed, [DOMAIN_CERTIFY, example_index])`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut id = 0x6a09_e667_f3bc_c909; // sqrt(2) fraction bits
        for &p in path {
            id = mix64(id ^ mix64(p));
        }
        Self::new(seed, id)
    }

    /// A child stream addressed relative to this one.
    pub fn substream(&self, tag: u64) -> Self {
        Self::new(self.seed, mix64(self.stream_id ^ mix64(tag)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of Gaussian samples delivered so far.
    pub fn position(&self) -> u64 {
        self.delivered
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in [0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi].
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Uniform integer in [0, bound) via 128-bit widening multiply.
    pub fn index_below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// One standard-normal draw (Box-Muller).
    pub fn next_std_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            self.delivered += 1;
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        self.delivered += 1;
        r * theta.cos()
    }

    /// Drop the cached Box-Muller half so the next draw starts a fresh
    /// pair. Used at phase boundaries where draw sets must not share
    /// underlying uniforms.
    pub fn discard_spare(&mut self) {
        self.spare = None;
    }

    /// Fill `out` with draws from N(0, sigma^2).
    pub fn fill_gaussian(&mut self, out: &mut [f64], sigma: f64) {
        for v in out.iter_mut() {
            *v = sigma * self.next_std_normal();
        }
    }
}

/// `count` independent draws from N(0, sigma^2), advancing the stream.
pub fn gaussian_sample(rng: &mut RngStream, count: usize, sigma: f64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::domain("gaussian_sample requires count >= 1"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::domain(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut out = vec![0.0; count];
    rng.fill_gaussian(&mut out, sigma);
    Ok(out)
}
