//! Seed plumbing. Every random draw in the crate comes from a SplitMix64
//! stream whose seed is derived from one user seed plus a purpose tag, so
//! the trainer, the splits and the distortions never share a stream.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(tag: &str) -> u64 {
    tag.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed for one purpose (`"train"`, `"split"`, `"distort/mixup"`, ...).
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    mix(seed ^ fnv1a(purpose))
}

pub fn stream(seed: u64, purpose: &str) -> SplitMix64 {
    SplitMix64::seed_from_u64(derive_seed(seed, purpose))
}

/// Per-item stream `seed ⊕ index`, so items can be processed in any order.
pub fn item_stream(seed: u64, index: usize) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed ^ index as u64)
}
