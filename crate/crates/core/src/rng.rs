//! Seeded random streams.
//!
//! Every run derives its randomness from one 64-bit seed. Components draw from
//! named substreams (distinct ChaCha stream ids) so that, for example, changing
//! the Monte-Carlo budget never perturbs the scheduler's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Real;

pub type StreamRng = ChaCha8Rng;

/// Named substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ProfileMc,
    Scheduler,
    Train,
    Sample,
    Data,
    Eval,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::ProfileMc => 1,
            Stream::Scheduler => 2,
            Stream::Train => 3,
            Stream::Sample => 4,
            Stream::Data => 5,
            Stream::Eval => 6,
        }
    }
}

/// Generator for a named substream of `seed`.
pub fn substream(seed: u64, stream: Stream) -> StreamRng {
    indexed_substream(seed, stream, 0)
}

/// Generator for item `index` of a named substream (e.g. one per grid cell).
pub fn indexed_substream(seed: u64, stream: Stream, index: u32) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream.id() << 32) | u64::from(index));
    rng
}

/// One standard normal draw.
#[inline]
pub fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

/// Fills `out` with standard normal draws.
pub fn fill_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, out: &mut [T]) {
    for v in out.iter_mut() {
        *v = normal(rng);
    }
}
