//! Deterministic seed derivation.
//!
//! Every random consumer derives its own stream from a master seed plus a
//! stable textual role name, so adding or reordering consumers never shifts
//! anyone else's stream. The hash is FNV-1a (fixed constants), not the
//! standard library hasher, whose output may change between Rust releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut acc: u64) -> u64 {
    for &b in bytes {
        acc ^= b as u64;
        acc = acc.wrapping_mul(FNV_PRIME);
    }
    acc
}

/// Stable sub-seed for a named role under a master seed.
pub fn subseed(master: u64, role: &str) -> u64 {
    let acc = fnv1a(&master.to_le_bytes(), FNV_OFFSET);
    fnv1a(role.as_bytes(), acc)
}

/// Sub-seed additionally keyed by an index (trial number, window id, ...).
pub fn subseed_indexed(master: u64, role: &str, index: u64) -> u64 {
    fnv1a(&index.to_le_bytes(), subseed(master, role))
}

/// Seeded RNG for a named role.
pub fn rng_for(master: u64, role: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(master, role))
}

/// Seeded RNG for a named, indexed role.
pub fn rng_for_indexed(master: u64, role: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed_indexed(master, role, index))
}
