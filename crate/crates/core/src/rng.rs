//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit generator. Independent
//! subsystems draw from separate ChaCha streams derived from one seed, so
//! that disabling one consumer never perturbs another.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as Rng;

/// Stream identifiers used by the training loop.
pub mod streams {
    pub const ENV: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const CRITIC: u64 = 3;
    pub const POLICY: u64 = 4;
    pub const INIT: u64 = 5;
    pub const EVAL: u64 = 6;
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn standard_normal(rng: &mut Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}
