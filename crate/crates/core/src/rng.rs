use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for one logical stream of a seeded run.
///
/// Distinct `stream` values never share output for the same `seed`, so each
/// stage of the pipeline can draw independently without threading a single
/// generator through every call.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const MIXTURE: u64 = 1;
    pub const RESERVOIR: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const KMEANS: u64 = 6;
    pub const SPLIT: u64 = 7;
}
