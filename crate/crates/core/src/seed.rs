//! Splittable randomness.
//!
//! Every random draw in the crate comes from [`stream`]. The 64-bit run seed
//! selects the ChaCha8 key (via `seed_from_u64`), and the pair
//! `(purpose tag, index)` selects one of the 2^64 independent ChaCha streams
//! under that key. The stream id is `fnv1a64(tag) ^ splitmix64(index)`.
//!
//! Tags used by the crate:
//!
//! | tag        | index        | consumer                         |
//! |------------|--------------|----------------------------------|
//! | `init`     | 0            | network weight initialization    |
//! | `data`     | 0            | synthetic dataset generation     |
//! | `batches`  | epoch        | batch shuffling                  |
//! | `assign`   | epoch        | random exit assignment           |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: &str = "init";
pub const TAG_DATA: &str = "data";
pub const TAG_BATCHES: &str = "batches";
pub const TAG_ASSIGN: &str = "assign";

/// Returns the deterministic random stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(tag.as_bytes()) ^ splitmix64(index));
    rng
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
