//! Seeded random streams.
//!
//! All randomness is drawn from `Pcg64` (128-bit LCG with XSL-RR output).
//! A generator is identified by `(seed, stream)`; distinct streams of the
//! same seed are statistically independent, which lets every image own its
//! own sequence regardless of processing order.

use rand_pcg::Pcg64;

pub type Rng = Pcg64;

/// Stream ids reserved for non-image consumers. Image streams use the low
/// range `image_index * IMAGE_STREAM_STRIDE + k`.
pub mod streams {
    pub const IMAGE_STREAM_STRIDE: u64 = 8;
    pub const INIT: u64 = 1 << 40;
    pub const ENCODER: u64 = (1 << 40) + 1;
    pub const SHUFFLE: u64 = (1 << 40) + 2;
    pub const DROPOUT: u64 = (1 << 40) + 3;
    pub const GRAD_CHECK: u64 = (1 << 40) + 4;
}

// splitmix64 finalizer, spreads small seeds over the state space
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let state = ((mix(seed) as u128) << 64) | mix(seed ^ 0xA5A5_A5A5_A5A5_A5A5) as u128;
    Pcg64::new(state, stream as u128)
}

/// Stream `k` of image `index`.
pub fn image_stream(seed: u64, index: usize, k: u64) -> Rng {
    debug_assert!(k < streams::IMAGE_STREAM_STRIDE);
    stream(seed, index as u64 * streams::IMAGE_STREAM_STRIDE + k)
}
