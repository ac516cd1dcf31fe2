//! Seed derivation. Every random stream in a run is derived from one root
//! seed, so probes, actions, agents and episode ordering are reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a parent seed with a sequence of integer keys.
pub fn derive(parent: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(mix64(parent), |acc, &k| mix64(acc ^ mix64(k)))
}

/// Hashes a stream name (FNV-1a) so sub-streams can be addressed by label.
pub fn named(parent: u64, name: &str) -> u64 {
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    derive(parent, &[h])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed of the distortion mask applied to `patch` at a given attack step.
/// Probes and actions share this derivation so a probed mask is exactly the
/// mask the action later applies.
pub fn mask_seed(step_seed: u64, filter_index: usize, patch: usize) -> u64 {
    derive(step_seed, &[filter_index as u64, patch as u64])
}

pub fn step_seed(episode_seed: u64, step: usize) -> u64 {
    derive(episode_seed, &[0x5354_4550, step as u64])
}
