//! Counter-based Gaussian noise.
//!
//! The generator is ChaCha8 (the `rand_chacha` stream cipher RNG). The key is
//! the 64-bit seed in little-endian order followed by a purpose byte (0 for
//! Brownian increments, 1 for initial sampling) and zeros. Particle `i` owns
//! stream `i`; step `k` starts at word `16 k`, so every `(seed, i, k)` block
//! is addressed directly and no state is shared between particles.
//!
//! Normals come from Box-Muller on 53-bit uniforms: two words per uniform,
//! one pair of uniforms per pair of normals.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Words of keystream reserved per `(particle, step)` block.
pub const WORDS_PER_BLOCK: u128 = 16;

/// Keystream purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Increment = 0,
    Initial = 1,
}

pub fn block_rng(seed: u64, purpose: Purpose, stream: u64, block: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = purpose as u8;
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng.set_word_pos(WORDS_PER_BLOCK * block as u128);
    rng
}

/// Uniform on `(0, 1]`.
pub fn open_uniform(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform on `[0, 1)`.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fills `out` with independent standard normals.
pub fn normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for pair in out.chunks_mut(2) {
        let u1 = open_uniform(rng);
        let u2 = uniform(rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        pair[0] = r * c;
        if pair.len() > 1 {
            pair[1] = r * s;
        }
    }
}

/// The `d` standard normals driving particle `i` over step `k`.
pub fn increment(seed: u64, particle: usize, step: usize, out: &mut [f64]) {
    let mut rng = block_rng(seed, Purpose::Increment, particle as u64, step as u64);
    normals(&mut rng, out);
}
