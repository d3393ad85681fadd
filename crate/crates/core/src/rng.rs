//! Keyed random streams: every stochastic decision draws from a generator
//! derived from the run seed plus a key, so results do not depend on the
//! order in which samples are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A generator for `(seed, key)`. The key words are folded into the stream id.
pub fn keyed_rng(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = key.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &k| splitmix(h ^ k));
    rng.set_stream(stream);
    rng
}

/// One step of the splitmix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
