//! Synthetic collections: Gaussian-cluster distractors plus planted media.

use nvtree::txn::checkpoint::MediaEntry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// Spread of cluster centers relative to the unit within-cluster deviation.
pub const CENTER_SPREAD: f32 = 4.0;
const BLOCK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Distractor vectors.
    pub n: usize,
    pub dim: usize,
    pub media: usize,
    pub descriptors_per_media: usize,
    /// Standard deviation of the additive noise on query descriptors.
    pub perturbation: f32,
    pub clusters: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            n: 10_000,
            dim: 32,
            media: 10,
            descriptors_per_media: 1000,
            perturbation: 0.0,
            clusters: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MediaQuery {
    /// The planted media the descriptors were derived from.
    pub media: u64,
    pub descriptors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: WorkloadSpec,
    /// Distractors first (ids `0..n`), then each media's descriptors.
    pub collection: Vec<Vec<f32>>,
    pub media: Vec<MediaEntry>,
    pub queries: Vec<MediaQuery>,
}

fn sub_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 32);
    rng
}

fn centers(dim: usize, clusters: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = sub_rng(seed, 1, 0);
    (0..clusters.max(1))
        .map(|_| {
            (0..dim)
                .map(|_| CENTER_SPREAD * rng.sample::<f32, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn sample_block(rng: &mut ChaCha8Rng, centers: &[Vec<f32>], count: usize, out: &mut Vec<Vec<f32>>) {
    for _ in 0..count {
        let c = &centers[rng.gen_range(0..centers.len())];
        out.push(
            c.iter()
                .map(|x| x + rng.sample::<f32, _>(StandardNormal))
                .collect(),
        );
    }
}

/// `n` distractors. The first `m` vectors of a larger call are the same as a
/// call with `n = m`, so sweeps can grow one collection.
pub fn distractors(n: usize, dim: usize, clusters: usize, seed: u64) -> Vec<Vec<f32>> {
    distractor_range(0, n, dim, clusters, seed)
}

/// Distractors `start..end` of the stable sequence.
pub fn distractor_range(
    start: usize,
    end: usize,
    dim: usize,
    clusters: usize,
    seed: u64,
) -> Vec<Vec<f32>> {
    let centers = centers(dim, clusters, seed);
    let mut out = Vec::with_capacity(end.saturating_sub(start));
    let mut block = start / BLOCK;
    while block * BLOCK < end {
        let mut rng = sub_rng(seed, 2, block as u64);
        let mut buf = Vec::with_capacity(BLOCK);
        sample_block(&mut rng, &centers, BLOCK, &mut buf);
        let base = block * BLOCK;
        for (i, v) in buf.into_iter().enumerate() {
            if (start..end).contains(&(base + i)) {
                out.push(v);
            }
        }
        block += 1;
    }
    out
}

/// Adds N(0, sigma) noise to every component.
pub fn perturb(v: &[f32], sigma: f32, rng: &mut impl Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return v.to_vec();
    }
    let noise = Normal::new(0.0f32, sigma).expect("finite sigma");
    v.iter().map(|x| x + noise.sample(rng)).collect()
}

pub fn generate_workload(spec: &WorkloadSpec) -> Workload {
    let mut collection = distractors(spec.n, spec.dim, spec.clusters, spec.seed);
    let centers = centers(spec.dim, spec.clusters, spec.seed);
    let mut media = Vec::with_capacity(spec.media);
    let mut queries = Vec::with_capacity(spec.media);
    for m in 0..spec.media {
        let mut rng = sub_rng(spec.seed, 3, m as u64);
        let start = collection.len() as u64;
        let mut descriptors = Vec::with_capacity(spec.descriptors_per_media);
        sample_block(
            &mut rng,
            &centers,
            spec.descriptors_per_media,
            &mut descriptors,
        );
        let mut qrng = sub_rng(spec.seed, 4, m as u64);
        let q = descriptors
            .iter()
            .map(|d| perturb(d, spec.perturbation, &mut qrng))
            .collect();
        collection.extend(descriptors);
        let id = m as u64 + 1;
        media.push(MediaEntry {
            media: id,
            start,
            end: collection.len() as u64,
        });
        queries.push(MediaQuery {
            media: id,
            descriptors: q,
        });
    }
    Workload {
        spec: spec.clone(),
        collection,
        media,
        queries,
    }
}

/// Perturbed copies of vectors drawn from `pool` (the first vectors of the
/// stable distractor sequence), for recall measurements.
pub fn recall_queries(
    pool: &[Vec<f32>],
    count: usize,
    perturbation: f32,
    seed: u64,
) -> Vec<Vec<f32>> {
    let mut rng = sub_rng(seed, 5, 0);
    (0..count)
        .map(|_| {
            let src = &pool[rng.gen_range(0..pool.len())];
            perturb(src, perturbation, &mut rng)
        })
        .collect()
}
