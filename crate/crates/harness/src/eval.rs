//! Recall, read-count, media-accuracy and throughput measurements.

use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use nvtree::ensemble::borda;
use nvtree::geometry::Vector;
use nvtree::{EnsembleIndex, IndexConfig, OpenOptions};
use serde::{Deserialize, Serialize};

use crate::oracle::ground_truth;
use crate::workload::{distractors, generate_workload, recall_queries, WorkloadSpec};

/// Recall-noise allowance used when checking the downward trend.
pub const TREND_TOLERANCE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub scales: Vec<usize>,
    pub dim: usize,
    pub clusters: usize,
    /// Workload seed; the index seed is `index_seed`.
    pub seed: u64,
    pub index_seed: u64,
    pub trees: usize,
    pub queries: usize,
    pub k: usize,
    pub perturbation: f32,
    /// Queries are perturbed copies of the first `pool` distractors.
    pub pool: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            scales: vec![10_000],
            dim: 32,
            clusters: 100,
            seed: 0,
            index_seed: 0,
            trees: 3,
            queries: 1000,
            k: 100,
            perturbation: 0.5,
            pool: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub p50_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

impl Latency {
    pub fn of(mut samples: Vec<Duration>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_unstable();
        let at =
            |p: f64| samples[((samples.len() - 1) as f64 * p).round() as usize].as_micros() as u64;
        Self {
            p50_us: at(0.5),
            p99_us: at(0.99),
            max_us: at(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub n: usize,
    pub queries: usize,
    /// Percent of ground-truth ids found in the aggregated top k.
    pub ensemble: f64,
    pub per_tree: Vec<f64>,
    /// Leaf-group fetches per query, per tree.
    pub reads_per_query: Vec<f64>,
    /// Queries where some tree fetched other than exactly one group.
    pub read_deviations: usize,
    pub latency: Latency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaAccuracy {
    pub perturbation: f32,
    pub media: usize,
    /// Percent of media queries whose top-voted media is the planted one.
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub spec: SweepSpec,
    pub points: Vec<RecallPoint>,
    pub non_increasing: bool,
}

impl RecallReport {
    /// The report without timing figures, which vary between runs.
    pub fn figures(&self) -> RecallReport {
        let mut r = self.clone();
        for p in &mut r.points {
            p.latency = Latency::default();
        }
        r
    }
}

pub fn to_vectors(collection: &[Vec<f32>], first_id: u64) -> Vec<Vector> {
    collection
        .iter()
        .enumerate()
        .map(|(i, c)| Vector {
            id: first_id + i as u64,
            components: c.clone(),
        })
        .collect()
}

pub fn index_config(dir: &Path, dim: usize, trees: usize, seed: u64) -> IndexConfig {
    let mut c = IndexConfig::new(dir, dim);
    c.trees = trees;
    c.seed = seed;
    c
}

/// Empty index filled by `txn_size`-vector insert transactions.
pub fn insert_build(
    config: IndexConfig,
    collection: &[Vec<f32>],
    txn_size: usize,
) -> Result<EnsembleIndex> {
    let index = EnsembleIndex::create(config)?;
    for chunk in collection.chunks(txn_size.max(1)) {
        index.insert_vectors(chunk.to_vec())?;
    }
    Ok(index)
}

/// Runs `queries` against the index; `truth[i]` holds the ids query `i`
/// should find.
pub fn measure_recall(
    index: &EnsembleIndex,
    queries: &[Vec<f32>],
    truth: &[Vec<u64>],
    k: usize,
) -> Result<RecallPoint> {
    ensure!(queries.len() == truth.len(), "one truth list per query");
    let trees = index.trees().len();
    let mut found_tree = vec![0usize; trees];
    let mut found_ens = 0usize;
    let mut expected = 0usize;
    let mut fetches = vec![0u64; trees];
    let mut deviations = 0;
    let mut times = Vec::with_capacity(queries.len());
    for (q, t) in queries.iter().zip(truth) {
        let before = index.stats().group_fetches;
        let start = Instant::now();
        let snap = index.snapshot_now();
        let per_tree = (0..trees)
            .map(|i| index.search_tree(i, q, k, &snap))
            .collect::<nvtree::Result<Vec<_>>>()?;
        let agg = borda(&per_tree, k);
        times.push(start.elapsed());
        let after = index.stats().group_fetches;
        let mut deviates = false;
        for i in 0..trees {
            let d = after[i] - before[i];
            fetches[i] += d;
            deviates |= d != 1;
        }
        deviations += deviates as usize;
        expected += t.len();
        for (i, r) in per_tree.iter().enumerate() {
            found_tree[i] += t.iter().filter(|id| r.iter().any(|n| n.id == **id)).count();
        }
        let ids = agg.ids();
        found_ens += t.iter().filter(|id| ids.contains(id)).count();
    }
    let pct = |f: usize| {
        if expected == 0 {
            0.0
        } else {
            100.0 * f as f64 / expected as f64
        }
    };
    let nq = queries.len().max(1) as f64;
    Ok(RecallPoint {
        n: index.stats().vectors_per_tree.first().copied().unwrap_or(0),
        queries: queries.len(),
        ensemble: pct(found_ens),
        per_tree: found_tree.into_iter().map(pct).collect(),
        reads_per_query: fetches.into_iter().map(|f| f as f64 / nq).collect(),
        read_deviations: deviations,
        latency: Latency::of(times),
    })
}

/// Fixed recall queries for a sweep and their exact nearest neighbor in a
/// collection of the given size.
pub fn sweep_queries(spec: &SweepSpec) -> Vec<Vec<f32>> {
    let pool = distractors(spec.pool, spec.dim, spec.clusters, spec.seed);
    recall_queries(&pool, spec.queries, spec.perturbation, spec.seed)
}

pub fn recall_at_scale(
    spec: &SweepSpec,
    n: usize,
    queries: &[Vec<f32>],
    dir: &Path,
) -> Result<RecallPoint> {
    let collection = distractors(n, spec.dim, spec.clusters, spec.seed);
    let truth = ground_truth(&collection, queries, 1);
    let config = index_config(dir, spec.dim, spec.trees, spec.index_seed);
    let index = EnsembleIndex::bulk_load(config, to_vectors(&collection, 0), &[])?;
    drop(collection);
    let point = measure_recall(&index, queries, &truth, spec.k)?;
    index.close()?;
    Ok(point)
}

/// Builds a fresh index per scale under `workdir` and measures recall of
/// the same queries against each.
pub fn run_recall_sweep(spec: &SweepSpec, workdir: &Path) -> Result<RecallReport> {
    ensure!(!spec.scales.is_empty(), "no scales given");
    ensure!(
        spec.scales.windows(2).all(|w| w[0] < w[1]),
        "scales must be ascending"
    );
    ensure!(
        spec.pool <= spec.scales[0],
        "query pool larger than the smallest scale"
    );
    let queries = sweep_queries(spec);
    let mut points = Vec::new();
    for &n in &spec.scales {
        let dir = workdir.join(format!("scale-{n}"));
        points.push(recall_at_scale(spec, n, &queries, &dir)?);
        std::fs::remove_dir_all(&dir)?;
    }
    let non_increasing = points
        .windows(2)
        .all(|w| w[1].ensemble <= w[0].ensemble + TREND_TOLERANCE);
    Ok(RecallReport {
        spec: spec.clone(),
        points,
        non_increasing,
    })
}

/// Media-query top-1 accuracy at each perturbation level. The collection
/// does not depend on the level, so one index serves all of them.
pub fn media_accuracy(
    spec: &WorkloadSpec,
    levels: &[f32],
    trees: usize,
    index_seed: u64,
    k: usize,
    dir: &Path,
) -> Result<Vec<MediaAccuracy>> {
    let w = generate_workload(spec);
    let config = index_config(dir, spec.dim, trees, index_seed);
    let index = EnsembleIndex::bulk_load(config, to_vectors(&w.collection, 0), &w.media)?;
    drop(w);
    let mut out = Vec::new();
    for &level in levels {
        let w = generate_workload(&WorkloadSpec {
            perturbation: level,
            n: 0,
            ..spec.clone()
        });
        let mut hits = 0;
        for q in &w.queries {
            let votes = index.media_query(&q.descriptors, k)?;
            hits += (votes.first().map(|v| v.media) == Some(q.media)) as usize;
        }
        out.push(MediaAccuracy {
            perturbation: level,
            media: w.queries.len(),
            top1: 100.0 * hits as f64 / w.queries.len().max(1) as f64,
        });
    }
    index.close()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub initial: usize,
    pub inserted: usize,
    pub batch: usize,
    /// Leaf-groups cached per tree, `None` for unlimited.
    pub cache_groups: Option<usize>,
    pub elapsed_s: f64,
    pub vectors_per_sec: f64,
    /// Longest single insert transaction, seconds.
    pub max_stall_s: f64,
    pub disk_reads: u64,
    pub splits: u64,
}

/// Inserts `stream` in `batch`-sized transactions into a bulk-loaded index
/// over `initial`, optionally reopened with a capped cache.
pub fn insert_throughput(
    dir: &Path,
    dim: usize,
    trees: usize,
    seed: u64,
    initial: &[Vec<f32>],
    stream: &[Vec<f32>],
    batch: usize,
    cache_groups: Option<usize>,
) -> Result<ThroughputReport> {
    let config = index_config(dir, dim, trees, seed);
    EnsembleIndex::bulk_load(config, to_vectors(initial, 0), &[])?.close()?;
    let index = EnsembleIndex::open_with(
        dir,
        &OpenOptions {
            cache_groups,
            ..OpenOptions::default()
        },
    )?;
    let mut stall = Duration::ZERO;
    let start = Instant::now();
    for chunk in stream.chunks(batch.max(1)) {
        let t = Instant::now();
        index.insert_vectors(chunk.to_vec())?;
        stall = stall.max(t.elapsed());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let stats = index.stats();
    index.close()?;
    Ok(ThroughputReport {
        initial: initial.len(),
        inserted: stream.len(),
        batch,
        cache_groups,
        elapsed_s: elapsed,
        vectors_per_sec: stream.len() as f64 / elapsed.max(1e-9),
        max_stall_s: stall.as_secs_f64(),
        disk_reads: stats.disk_reads.iter().sum(),
        splits: stats.splits.iter().sum(),
    })
}
