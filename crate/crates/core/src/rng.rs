//! Counter-based random streams keyed by a seed and a stream label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to turn labels into stream ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stream `stream` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream named by `label`; the same `(seed, label)` always yields the same sequence.
pub fn named_rng(seed: u64, label: &str) -> ChaCha8Rng {
    stream_rng(seed, fnv1a(label.as_bytes()))
}
