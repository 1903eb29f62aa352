//! Splittable seeding.
//!
//! Every random quantity in the pipeline is drawn from a ChaCha8 stream whose
//! key is derived from a root seed and a path of indices (equation slot,
//! attempt, path, ...). Two streams with different index paths are
//! independent, and a given stream does not depend on how many siblings were
//! drawn before it, so generation can be parallelised and resumed freely.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedTree(u64);

impl SeedTree {
    pub const fn new(seed: u64) -> Self {
        SeedTree(seed)
    }

    pub fn key(self) -> u64 {
        self.0
    }

    pub fn child(self, index: u64) -> Self {
        SeedTree(splitmix(self.0 ^ splitmix(index.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    /// Convenience for named sub-streams (`"noise"`, `"thin"`, ...).
    pub fn named(self, label: &str) -> Self {
        let h = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        self.child(h)
    }

    pub fn rng(self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn children_are_distinct_and_stable() {
        let root = SeedTree::new(7);
        assert_ne!(root.child(0), root.child(1));
        assert_ne!(root.child(0).child(1), root.child(1).child(0));
        assert_eq!(root.child(3), SeedTree::new(7).child(3));
        let a: u64 = root.child(3).rng().random();
        let b: u64 = root.child(3).rng().random();
        assert_eq!(a, b);
    }
}
