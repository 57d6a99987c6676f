//! Seed splitting.
//!
//! Every random stream in the simulator is keyed by `(master seed, tag, index)`.
//! The tag names the operation ("partition", "corrupt", "shuffle", ...) and the
//! index is usually a client id or a round number, so streams never depend on
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed: FNV-1a over the tag, then two SplitMix64 rounds
/// folding in the master seed and the index.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let a = splitmix64(master ^ h);
    splitmix64(a ^ splitmix64(index))
}

pub fn stream(master: u64, tag: &str, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, tag, index))
}
