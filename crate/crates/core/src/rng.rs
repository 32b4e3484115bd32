//! Deterministic random streams keyed by experiment coordinates.
//!
//! Every consumer of randomness derives its own generator from the run seed
//! plus a purpose tag and coordinates, so results never depend on the order
//! in which clients or tasks happen to execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Dataset = 1,
    TaskOrder = 2,
    TrainValSplit = 3,
    Partition = 4,
    Backbone = 5,
    Adapter = 6,
    Head = 7,
    LocalTrain = 8,
    Verify = 9,
}

/// Generator for `(seed, purpose, coords...)`.
pub fn stream(seed: u64, purpose: Purpose, coords: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed ^ splitmix64(purpose as u64));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
