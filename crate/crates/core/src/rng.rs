//! Named deterministic random streams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent stream for `(seed, name)`. Different names give
/// non-overlapping ChaCha streams over the same key.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Stream for an indexed item, e.g. one utterance or one epoch.
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> StreamRng {
    stream(seed, &format!("{name}/{index}"))
}
