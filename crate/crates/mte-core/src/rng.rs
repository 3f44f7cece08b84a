//! Deterministic seed derivation for parallel simulation streams.
//!
//! Monte Carlo drivers hand every (task, replication) pair its own RNG whose
//! seed is a pure function of the root seed and the task coordinates. Results
//! are therefore independent of scheduling order and of whether a sweep was
//! checkpointed and resumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche behavior for seed mixing.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a stream path.
///
/// Each path element is folded in with a SplitMix64 round, so
/// `derive_seed(s, &[i, j])` defines a family of decorrelated streams
/// indexed by `(i, j)`.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(root ^ 0x6a09_e667_f3bc_c908);
    for &p in path {
        state = splitmix64(state ^ splitmix64(p));
    }
    state
}

/// RNG for the stream identified by `path` under `root`.
pub fn rng_for(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}
