// SPDX-License-Identifier: Apache-2.0

//! Keyed deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream derived from a
//! base seed plus a purpose tag and any number of integer keys, so that
//! independent consumers never share state and results do not depend on the
//! order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tags keep streams for different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    EncoderWeights = 1,
    SimWeights = 2,
    Replacement = 3,
    TextBank = 4,
    Proposals = 5,
    Scene = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an RNG from `(seed, stream, keys...)`.
pub fn keyed(seed: u64, stream: Stream, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut bytes = [0u8; 32];
    let mut state = h;
    for chunk in bytes.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// A 64-bit seed for a sub-component, derived like [`keyed`].
pub fn derive_seed(seed: u64, stream: Stream, keys: &[u64]) -> u64 {
    rand::Rng::random(&mut keyed(seed, stream, keys))
}

pub fn gaussian<R: rand::Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
