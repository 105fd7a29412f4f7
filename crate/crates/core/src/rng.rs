//! Named sub-streams of a master seed.
//!
//! Every stochastic component (initialization, shuffling, label noise, peer
//! draws, augmentation) pulls from its own stream so that enabling one
//! component never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

// FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the sub-stream `name` at position `index` (epoch, stage, class...).
pub fn substream_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix(splitmix(master ^ fnv1a(name.as_bytes())) ^ splitmix(index.wrapping_add(1)))
}

pub fn substream(master: u64, name: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(substream_seed(master, name, index))
}
