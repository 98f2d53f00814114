//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream derived
//! from one user seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes that get disjoint stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Split,
    Epoch(u64),
    Sample,
    DataDraw,
    Synthetic,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Split => 2,
            Stream::Sample => 3,
            Stream::DataDraw => 4,
            Stream::Synthetic => 5,
            Stream::Epoch(e) => (1 << 32) | e,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = stream_rng(5, Stream::Init).random();
        let b: u64 = stream_rng(5, Stream::Init).random();
        let c: u64 = stream_rng(5, Stream::Epoch(0)).random();
        let d: u64 = stream_rng(6, Stream::Init).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
