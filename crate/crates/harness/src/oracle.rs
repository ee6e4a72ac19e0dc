//! Exhaustive-scan ground truth. Shares no code with the index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Squared Euclidean distance, accumulated in eight lanes.
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            let d = a[c * 8 + l] - b[c * 8 + l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        let d = a[i] - b[i];
        tail += d * d;
    }
    acc.iter().sum::<f32>() + tail
}

#[derive(PartialEq)]
struct Cand(f32, u64);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Exact k nearest ids of `q`; vector `i` of `collection` has id `i`.
/// Ties go to the lower id.
pub fn brute_force_knn(collection: &[Vec<f32>], q: &[f32], k: usize) -> Vec<u64> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
    for (i, v) in collection.iter().enumerate() {
        let c = Cand(squared_distance(v, q), i as u64);
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().unwrap() {
            heap.pop();
            heap.push(c);
        }
    }
    heap.into_sorted_vec().into_iter().map(|c| c.1).collect()
}

/// Exact neighbors for a batch of queries.
pub fn ground_truth(collection: &[Vec<f32>], queries: &[Vec<f32>], k: usize) -> Vec<Vec<u64>> {
    queries
        .iter()
        .map(|q| brute_force_knn(collection, q, k))
        .collect()
}

/// Second, deliberately naive implementation: f64 distances and a full sort.
pub fn quadratic_scan_knn(collection: &[Vec<f32>], q: &[f32], k: usize) -> Vec<u64> {
    let mut all: Vec<(f64, u64)> = Vec::with_capacity(collection.len());
    for i in 0..collection.len() {
        let mut s = 0.0f64;
        for j in 0..q.len() {
            let d = collection[i][j] as f64 - q[j] as f64;
            s += d * d;
        }
        all.push((s, i as u64));
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|x| x.1).collect()
}
