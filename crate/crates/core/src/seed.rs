//! Seed derivation. Every random draw in the crate flows from a root seed through
//! [`derive_seed`], so results do not depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a root seed together with a path of indices (splitmix64 chaining).
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut state = mix(root.wrapping_add(GOLDEN));
    for &p in path {
        state = mix(state ^ mix(p.wrapping_add(GOLDEN)));
    }
    state
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
