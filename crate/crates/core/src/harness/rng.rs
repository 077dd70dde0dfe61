//! Counter-based random streams: every consumer gets its own ChaCha stream
//! keyed by `(seed, purpose)`, so results do not depend on call order or
//! thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Train,
    SourceVal,
    TargetTest,
    Probe(u64),
    Init,
    Batches,
    Other(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Train => 1,
            Stream::SourceVal => 2,
            Stream::TargetTest => 3,
            Stream::Init => 4,
            Stream::Batches => 5,
            Stream::Probe(t) => (1 << 32) | (t & 0xffff_ffff),
            Stream::Other(t) => (2 << 32) | (t & 0xffff_ffff),
        }
    }
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose.id());
    rng
}
