//! Counter-based Gaussian increments.
//!
//! A stream is a ChaCha8 keystream keyed by the 64-bit seed and selected by
//! the 64-bit stream id; the `k`-th normal drawn from a stream consumes
//! keystream words `2k` and `2k+1`, so a given (seed, stream, step,
//! coordinate) always maps to the same variate no matter which worker
//! produces it.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::special::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Stream for path `index` of a Monte Carlo run rooted at `self`.
    ///
    /// Path streams occupy `(stream_id << 32) | index`, so distinct root
    /// stream ids below `2^32` never share a path stream.
    pub fn path(&self, index: u64) -> Self {
        debug_assert!(index < (1 << 32));
        Self { seed: self.seed, stream_id: (self.stream_id << 32) | index }
    }

    pub fn normals(&self) -> NormalSource {
        NormalSource::new(*self)
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_from_seed(seed: u64) -> [u8; 32] {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Sequential reader over the standard normals of one stream.
#[derive(Debug, Clone)]
pub struct NormalSource {
    rng: ChaCha8Rng,
}

impl NormalSource {
    pub fn new(stream: RngStream) -> Self {
        let mut rng = ChaCha8Rng::from_seed(key_from_seed(stream.seed));
        rng.set_stream(stream.stream_id);
        Self { rng }
    }

    /// Rewinds to the start of another stream under the same seed.
    pub fn reset(&mut self, stream_id: u64) {
        self.rng.set_stream(stream_id);
        self.rng.set_word_pos(0);
    }

    /// Jumps to the `index`-th normal of the stream.
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(2 * index as u128);
    }

    /// Uniform on the open interval (0, 1) with 53 random bits.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11;
        (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        normal_quantile(self.next_uniform())
    }
}
