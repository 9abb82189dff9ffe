//! Seeded random streams.
//!
//! Every consumer derives its own stream from the global seed plus a purpose
//! tag and indices, so results never depend on how work is batched or
//! scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DstRng = ChaCha8Rng;

/// Purpose tags keep streams for different consumers apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Noise = 3,
    Dropout = 4,
    Corpus = 5,
    Split = 6,
    Probe = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &i in indices {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x5151)));
    }
    h
}

pub fn stream_rng(seed: u64, stream: Stream, indices: &[u64]) -> DstRng {
    DstRng::seed_from_u64(derive_seed(seed, stream, indices))
}
