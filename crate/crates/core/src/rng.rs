//! Reproducible random streams.
//!
//! All randomness flows through ChaCha8, a counter-based generator. A run is
//! keyed by a 64-bit seed; independent consumers (trials, samples) get their
//! own stream id so results do not depend on scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

pub type StreamRng = ChaCha8Rng;

/// Generator for stream `stream` of the run keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a tag into a seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::of(z)
}

/// `+1` with probability `p_plus`, else `-1`.
#[inline]
pub fn signed_bernoulli<T: Scalar, R: Rng + ?Sized>(rng: &mut R, p_plus: f64) -> T {
    if rng.random::<f64>() < p_plus {
        T::one()
    } else {
        -T::one()
    }
}
