//! Reproducible random substreams.
//!
//! Every random quantity in a simulation is drawn from
//! `substream(seed, purpose, index)`: a ChaCha8 generator keyed by the master
//! seed mixed with a purpose tag, positioned on stream `index`. Subject `i` of
//! a cohort, or failure `j` of a risk-set sample, therefore sees the same
//! numbers no matter how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags separating independent uses of one seed.
pub mod purpose {
    pub const SUBJECT: u64 = 0x5355_424a;
    pub const SUBJECT_RETRY: u64 = 0x5245_5452;
    pub const CONTROLS: u64 = 0x4354_524c;
    pub const REPLICATION: u64 = 0x5245_504c;
    pub const COHORT: u64 = 0x434f_484f;
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const THEORY_SINGLE: u64 = 0x5448_5331;
    pub const THEORY_TUPLE: u64 = 0x5448_5354;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(seed, purpose, index)`; distinct inputs give unrelated outputs.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ purpose) ^ index)
}

pub fn substream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, 0));
    rng.set_stream(index);
    rng
}
