//! Deterministic random streams.
//!
//! All randomness flows through explicitly seeded ChaCha8 generators.
//! Independent streams are derived from a root seed plus a purpose tag, so
//! parallel workers and resumed runs draw exactly the same numbers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A seeded random stream. Thin wrapper so call sites name streams by role.
pub type Stream = ChaCha8Rng;

/// Derives an independent stream from `(root, tag, index)`.
///
/// ChaCha keys the generator with the root seed and selects one of 2^64
/// non-overlapping streams per (tag, index) pair, so children never collide.
pub fn stream(root: u64, tag: StreamTag, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(((tag as u64) << 56) ^ index);
    rng
}

/// Purpose tags for derived streams. Keep variants stable: they are part of
/// the reproducibility contract (checkpoints store only the root seed).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamTag {
    ParamInit = 1,
    InnerData = 2,
    OuterData = 3,
    TaskSample = 4,
    ValPool = 5,
    ProbeSubsample = 6,
    Eval = 7,
    FewShot = 8,
    Generate = 9,
    Diagnostics = 10,
    Rollout = 11,
    Solver = 12,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_draws() {
        let mut a = stream(7, StreamTag::Generate, 3);
        let mut b = stream(7, StreamTag::Generate, 3);
        for _ in 0..32 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn distinct_tags_decorrelate() {
        let mut a = stream(7, StreamTag::Generate, 0);
        let mut b = stream(7, StreamTag::Eval, 0);
        let same = (0..64).filter(|_| a.gen::<u64>() == b.gen::<u64>()).count();
        assert_eq!(same, 0);
    }
}
