//! Counter-based seed splitting.
//!
//! Every random consumer draws from its own ChaCha stream whose seed is a
//! hash of `(master seed, stream tag, counter)`. Resuming a run therefore
//! only needs the counters, never generator internals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent sources of randomness in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Split,
    Shuffle,
    Mask,
    OpSample,
    Alpha,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::Split => "split",
            Stream::Shuffle => "shuffle",
            Stream::Mask => "mask",
            Stream::OpSample => "op-sample",
            Stream::Alpha => "alpha",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSplitter {
    master: u64,
}

impl SeedSplitter {
    pub fn new(master: u64) -> Self {
        SeedSplitter { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed(&self, stream: Stream, index: u64) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.master.to_le_bytes());
        h.update(stream.tag().as_bytes());
        h.update(index.to_le_bytes());
        h.finalize().into()
    }

    pub fn rng(&self, stream: Stream, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.seed(stream, index))
    }
}
