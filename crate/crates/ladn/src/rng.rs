//! Counter-style seed derivation. Every random stream in the crate is a
//! pure function of (master seed, purpose tag, counter), so resuming a run
//! needs only the seed and the step/epoch counters; there is no hidden RNG
//! state to carry across checkpoints. Hashing is SHA-256, which is stable
//! across platforms and Rust versions (unlike `DefaultHasher`).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, tag: &str, counter: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0x1f]);
    h.update(tag.as_bytes());
    h.update([0x1f]);
    h.update(counter.to_le_bytes());
    h.finalize().into()
}

pub fn stream(master: u64, tag: &str, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master, tag, counter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a: Vec<u32> = (0..4).map(|_| stream(7, "noise", 3).gen()).collect();
        assert!(a.iter().all(|&v| v == a[0]), "same derivation must replay identically");
        let mut r1 = stream(7, "noise", 3);
        let mut r2 = stream(7, "noise", 4);
        let mut r3 = stream(7, "shuffle", 3);
        let (v1, v2, v3): (u64, u64, u64) = (r1.gen(), r2.gen(), r3.gen());
        assert_ne!(v1, v2, "counter must separate streams");
        assert_ne!(v1, v3, "tag must separate streams");
    }
}
