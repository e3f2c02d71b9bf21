//! Seeded, splittable random streams.
//!
//! A stream is identified by `(seed, stream_id)`. The generator is ChaCha8 with
//! its 64-bit stream counter set to `stream_id`, so two streams with the same
//! seed and different ids never overlap. Nested work (repetition `r`, then
//! bootstrap replicate `b`) derives child streams with [`RngStream::child`],
//! which hashes the parent coordinates into a fresh seed. Output is therefore a
//! pure function of the coordinates and never of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// A generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Stream `id` nested under this one.
    pub fn child(&self, id: u64) -> Self {
        let seed = splitmix64(splitmix64(self.seed) ^ splitmix64(self.stream_id.wrapping_add(0x5851_F42D_4C95_7F2D)));
        Self { seed, stream_id: id }
    }
}
