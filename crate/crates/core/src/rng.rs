//! Seeded random streams.
//!
//! Every random quantity is drawn from a ChaCha stream keyed by the run seed
//! and a domain tag, with the image index selecting the stream. Images can
//! therefore be generated in any order (or in parallel) with identical output.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Independent purposes that consume randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Phantom = 1,
    Rotation = 2,
    Contrast = 3,
    Noise = 4,
    Assignment = 5,
    Test = 99,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for item `index` of `domain` under `seed`.
pub fn substream(seed: u64, domain: Domain, index: u64) -> ChaCha12Rng {
    let key = splitmix64(seed ^ splitmix64(domain as u64));
    let mut rng = ChaCha12Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
