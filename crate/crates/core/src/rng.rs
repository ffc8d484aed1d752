//! Reproducible, splittable random streams.
//!
//! Every stochastic component draws from a [`RngStream`] identified by a run
//! seed and a stream id. Child streams are derived by hashing a path
//! (run seed → node id → chain id) into the id, so results never depend on
//! how work is scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    /// Root stream of a run.
    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    /// Independent child stream; does not advance `self`.
    pub fn derive(&self, child: u64) -> Self {
        let id = splitmix64(self.stream_id ^ splitmix64(child.wrapping_add(0xA076_1D64_78BD_642F)));
        Self::new(self.seed, id)
    }

    /// Child stream for a labelled sub-task, e.g. `derive_named("inducing")`.
    pub fn derive_named(&self, label: &str) -> Self {
        let h = label
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3));
        self.derive(h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Restores a stream at a recorded position.
    pub fn at_position(seed: u64, stream_id: u64, word_pos: u128) -> Self {
        let mut s = Self::new(seed, stream_id);
        s.rng.set_word_pos(word_pos);
        s
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
