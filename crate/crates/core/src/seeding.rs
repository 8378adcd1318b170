//! Deterministic seed derivation.
//!
//! Every random process in the workspace draws its seed from one root seed
//! through [`split_seed`], so independent stages (phantom generation, start
//! poses, correspondence noise, training) stay decoupled: changing how many
//! draws one stage makes never shifts another stage's stream.

/// SplitMix64 finalizer; good avalanche on 64-bit inputs.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from `root` for the stream named
/// `domain`, position `index`.
pub fn split_seed(root: u64, domain: &str, index: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for &b in domain.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    mix(h ^ mix(root) ^ mix(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}
