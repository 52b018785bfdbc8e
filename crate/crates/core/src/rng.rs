//! Seeded random streams.
//!
//! Each (seed, arm, shots, query) combination gets its own ChaCha stream
//! derived by hashing, so adding or removing an arm never shifts the
//! randomness another arm sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, arm: &str, shots: usize, query_id: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((arm.len() as u64).to_le_bytes());
    h.update(arm.as_bytes());
    h.update((shots as u64).to_le_bytes());
    h.update(query_id.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_of_each_other() {
        let a1: u64 = stream_rng(1, "RS", 4, 10).random();
        let a2: u64 = stream_rng(1, "RS", 4, 10).random();
        let b: u64 = stream_rng(1, "SI", 4, 10).random();
        let c: u64 = stream_rng(1, "RS", 8, 10).random();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert_ne!(a1, c);
    }
}
