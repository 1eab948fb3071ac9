//! Counter-based randomness: every draw is keyed by
//! `(seed, replication, player, stage, kind)` and generated from its own
//! cipher stream. Draws are independent across keys, reproducible, and
//! permutation experiments can reroute whole per-player streams exactly
//! instead of statistically.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DrawKind {
    InitialState = 0,
    Action = 1,
    Transition = 2,
}

/// One uniform draw in [0, 1) for the keyed stream.
pub(crate) fn draw_uniform(
    seed: u64,
    replication: u64,
    player: u32,
    stage: u32,
    kind: DrawKind,
) -> f64 {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replication.to_le_bytes());
    key[16..20].copy_from_slice(&player.to_le_bytes());
    key[20..24].copy_from_slice(&stage.to_le_bytes());
    key[24] = kind as u8;
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.random()
}

/// Inverse-CDF draw from a probability row.
pub(crate) fn sample_categorical(probs: &[f64], mut r: f64) -> usize {
    for (i, &p) in probs.iter().enumerate() {
        if r < p {
            return i;
        }
        r -= p;
    }
    probs.len() - 1
}
