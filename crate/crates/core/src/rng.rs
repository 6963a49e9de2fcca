//! Seed derivation for named random substreams.
//!
//! A run is reproduced from one global seed. Each consumer (k-means init,
//! agent init, batch shuffling, synthetic data, oracle noise) draws from its
//! own substream so that changing how much randomness one consumer uses
//! never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Substream used for k-means centroid initialization.
pub const KMEANS: &str = "kmeans";
/// Substream used for agent weight initialization.
pub const INIT: &str = "init";
/// Substream used for training batch shuffles.
pub const SHUFFLE: &str = "shuffle";
/// Substream used for synthetic feature generation.
pub const SYNTH: &str = "synth";
/// Substream used for simulated-oracle noise.
pub const ORACLE: &str = "oracle";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of byte strings into a 64-bit seed, starting from `seed`.
///
/// Platform independent: only byte values and lengths enter the hash.
pub fn mix_seed<'a>(seed: u64, parts: impl IntoIterator<Item = &'a [u8]>) -> u64 {
    let mut h = splitmix64(seed);
    for part in parts {
        h = splitmix64(h ^ part.len() as u64);
        for chunk in part.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            h = splitmix64(h ^ u64::from_le_bytes(buf));
        }
    }
    h
}

/// Derives the seed of the named substream of `global_seed`.
pub fn substream_seed(global_seed: u64, name: &str) -> u64 {
    mix_seed(global_seed, [name.as_bytes()])
}

/// Seeded generator used everywhere in the crate.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
