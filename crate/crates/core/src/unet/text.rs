//! Deterministic prompt embedding: a hash-seeded Gaussian vector standing in for
//! a pretrained text encoder. The empty (or all-whitespace) prompt is the null
//! prompt and maps to the zero vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn is_null_prompt(prompt: &str) -> bool {
    prompt.trim().is_empty()
}

pub fn embed_prompt(prompt: &str, dim: usize) -> Vec<f64> {
    if is_null_prompt(prompt) {
        return vec![0.0; dim];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(prompt.trim().as_bytes()));
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        })
        .collect()
}
