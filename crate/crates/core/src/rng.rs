use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent deterministic stream `stream` of the generator seeded by `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate, kept distinct so that components never
/// share random numbers by accident.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const SHAPES: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const CALIBRATION: u64 = 6;
    pub const OPTIMIZER: u64 = 7;
    /// Per-instance streams are offset from these bases.
    pub const INSTANCE_BASE: u64 = 1 << 32;
    pub const EXPLAIN_BASE: u64 = 2 << 32;
    pub const EVALUATE_BASE: u64 = 3 << 32;
    pub const POOL_BASE: u64 = 4 << 32;
}
