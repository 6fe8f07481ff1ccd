//! Stateless deterministic RNG derivation.
//!
//! Every random stream in the crate is derived on demand from the single
//! global seed, a short label, and integer coordinates (sample index, epoch,
//! ...). Nothing needs RNG state serialized for resume, and adding or
//! removing one stream never perturbs the others.

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hash::Hasher;

/// Collapse (seed, label, coordinates) into a 64-bit stream seed.
pub fn stream_seed(global_seed: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(global_seed);
    h.write(label.as_bytes());
    for &p in parts {
        h.write_u64(p);
    }
    h.finish()
}

/// Independent generator for one derived stream.
pub fn rng_for(global_seed: u64, label: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(global_seed, label, parts))
}

/// Stable 64-bit hash of a string (dataset split tags, parameter names).
pub fn fnv1a_str(s: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}
