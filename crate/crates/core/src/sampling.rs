//! Hierarchical sampling: candidates are grouped by structural hash and only
//! a logarithmic number of random representatives per group is costed.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::loopnest::{mix, LoopNestState};

/// Candidates partitioned by structural hash at one depth.
#[derive(Debug, Clone)]
pub struct BucketSet<T = LoopNestState> {
    pub buckets: BTreeMap<u64, Vec<T>>,
    pub depth: usize,
    pub rng_seed: u64,
}

impl<T> BucketSet<T> {
    pub fn len(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }
}

/// One sampled candidate with the bucket it came from.
#[derive(Debug, Clone)]
pub struct Sampled<T = LoopNestState> {
    pub item: T,
    pub depth: usize,
    pub bucket_hash: u64,
    pub bucket_size: usize,
}

/// `max(1, floor(log2(b)))` for a bucket of size `b`.
pub fn representatives_for(bucket_size: usize) -> usize {
    if bucket_size == 0 {
        0
    } else {
        (bucket_size.ilog2() as usize).max(1)
    }
}

/// Groups items by a caller-supplied key, keeping input order within a
/// bucket.
pub fn bucket_by<T>(items: Vec<T>, depth: usize, rng_seed: u64, key: impl Fn(&T) -> u64) -> BucketSet<T> {
    let mut buckets: BTreeMap<u64, Vec<T>> = BTreeMap::new();
    for it in items {
        buckets.entry(key(&it)).or_default().push(it);
    }
    BucketSet { buckets, depth, rng_seed }
}

/// Groups states by their structural hash at `depth`.
pub fn bucket_candidates(candidates: Vec<LoopNestState>, depth: usize, rng_seed: u64) -> BucketSet {
    bucket_by(candidates, depth, rng_seed, |s| s.structural_hash(depth))
}

/// Uniform draws without replacement from every bucket. Each bucket uses
/// its own RNG stream derived from the seed and its hash, so the draw from
/// one bucket does not depend on the others.
pub fn sample_representatives<T: Clone>(set: &BucketSet<T>) -> Vec<Sampled<T>> {
    let mut out = Vec::new();
    for (&hash, items) in &set.buckets {
        let k = representatives_for(items.len());
        let mut rng = ChaCha8Rng::seed_from_u64(mix(set.rng_seed, hash));
        let mut picks = index::sample(&mut rng, items.len(), k).into_vec();
        picks.sort_unstable();
        for i in picks {
            out.push(Sampled { item: items[i].clone(), depth: set.depth, bucket_hash: hash, bucket_size: items.len() });
        }
    }
    out
}

/// Every item, annotated as if sampled (sampling disabled).
pub fn take_all<T: Clone>(set: &BucketSet<T>) -> Vec<Sampled<T>> {
    set.buckets
        .iter()
        .flat_map(|(&hash, items)| {
            items.iter().map(move |it| Sampled { item: it.clone(), depth: set.depth, bucket_hash: hash, bucket_size: items.len() })
        })
        .collect()
}
