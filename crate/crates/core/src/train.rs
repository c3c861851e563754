//! Seeded batching shared by the training stages.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG for one epoch of one stage; independent of what ran before, so a
/// resumed run sees the same stream.
pub fn stage_rng(seed: u64, stage: &str, epoch: usize) -> ChaCha8Rng {
    // FNV-1a of the stage name picks the stream
    let mut h: u64 = 0xcbf29ce484222325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
    rng.set_stream(h);
    rng
}

/// Shuffled batches of item indices; items only share a batch with items of
/// the same `key` (e.g. sequence length).
pub fn epoch_batches(keys: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in keys.iter().enumerate() {
        buckets.entry(k).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, mut idx) in buckets {
        idx.shuffle(rng);
        out.extend(idx.chunks(batch.max(1)).map(<[usize]>::to_vec));
    }
    out.shuffle(rng);
    out
}
