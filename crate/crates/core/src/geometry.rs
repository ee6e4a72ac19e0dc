//! Projection and partitioning primitives.
//!
//! Every level of an NV-tree reduces vectors to scalars by projecting them onto
//! a random unit line, then cuts the line into a handful of partitions. The
//! functions here are pure; they hold no state beyond their inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

/// Smallest and largest fanout accepted for tree-level partitioning.
pub const MIN_FANOUT: usize = 4;
pub const MAX_FANOUT: usize = 8;

/// A feature vector with its globally unique identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    pub id: u64,
    pub components: Vec<f32>,
}

impl Vector {
    /// Builds a vector, rejecting NaN and infinite components.
    pub fn new(id: u64, components: Vec<f32>) -> Result<Self> {
        if let Some(pos) = components.iter().position(|c| !c.is_finite()) {
            return Err(invalid(format!(
                "vector {id}: component {pos} is not finite"
            )));
        }
        Ok(Self { id, components })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }
}

/// A unit direction regenerated bit-exactly from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionLine {
    seed: u64,
    direction: Vec<f32>,
}

impl ProjectionLine {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn direction(&self) -> &[f32] {
        &self.direction
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    /// Inner product with `components`, accumulated in f64.
    pub fn project(&self, components: &[f32]) -> Result<f64> {
        if components.len() != self.direction.len() {
            return Err(invalid(format!(
                "dimension mismatch: vector has {}, line has {}",
                components.len(),
                self.direction.len()
            )));
        }
        Ok(self.project_unchecked(components))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, components: &[f32]) -> f64 {
        debug_assert_eq!(components.len(), self.direction.len());
        // Four independent accumulators keep the loop vectorizable without
        // changing the result between calls.
        let mut acc = [0.0f64; 4];
        let chunks = components
            .chunks_exact(4)
            .zip(self.direction.chunks_exact(4));
        for (c, d) in chunks {
            acc[0] += c[0] as f64 * d[0] as f64;
            acc[1] += c[1] as f64 * d[1] as f64;
            acc[2] += c[2] as f64 * d[2] as f64;
            acc[3] += c[3] as f64 * d[3] as f64;
        }
        let tail = components.len() - components.len() % 4;
        let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for i in tail..components.len() {
            sum += components[i] as f64 * self.direction[i] as f64;
        }
        sum
    }
}

/// Projects `v` onto `line`.
pub fn project(v: &Vector, line: &ProjectionLine) -> Result<f64> {
    line.project(&v.components)
}

/// Draws an isotropic Gaussian direction from `seed` and normalizes it.
pub fn make_line(seed: u64, dim: usize) -> Result<ProjectionLine> {
    if dim == 0 {
        return Err(invalid("projection line dimension must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            let direction = raw.iter().map(|x| (x / norm) as f32).collect();
            return Ok(ProjectionLine { seed, direction });
        }
    }
}

/// Mixes two 64-bit values into a new seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        ^ tag
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PartitionStrategy {
    EqualDistance = 0,
    EqualCardinality = 1,
}

impl PartitionStrategy {
    pub(crate) fn from_wire(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::EqualDistance),
            1 => Some(Self::EqualCardinality),
            _ => None,
        }
    }
}

/// Ordered boundaries cutting a projection line into partitions.
///
/// Partition `i` is the interval `(boundaries[i-1], boundaries[i]]`; the outer
/// partitions are closed by the data minimum and maximum recorded at build
/// time, which also define the outer partition centers.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    boundaries: Vec<f64>,
    strategy: PartitionStrategy,
    min: f64,
    max: f64,
    centers: Vec<f64>,
}

impl PartitionSpec {
    pub(crate) fn from_parts(
        boundaries: Vec<f64>,
        strategy: PartitionStrategy,
        min: f64,
        max: f64,
    ) -> Result<Self> {
        if boundaries.len() + 1 > MAX_FANOUT {
            return Err(invalid(format!(
                "fanout {} exceeds {MAX_FANOUT}",
                boundaries.len() + 1
            )));
        }
        if boundaries.windows(2).any(|w| !(w[0] < w[1]))
            || boundaries.iter().any(|b| !b.is_finite())
        {
            return Err(invalid(
                "partition boundaries must be finite and strictly increasing",
            ));
        }
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(invalid(
                "partition data range must be finite with min <= max",
            ));
        }
        let centers = compute_centers(&boundaries, min, max);
        Ok(Self {
            boundaries,
            strategy,
            min,
            max,
            centers,
        })
    }

    /// A spec with no boundaries: everything maps to partition 0.
    pub fn single(min: f64, max: f64) -> Self {
        Self::from_parts(Vec::new(), PartitionStrategy::EqualCardinality, min, max)
            .expect("single partition is always valid")
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn strategy(&self) -> PartitionStrategy {
        self.strategy
    }

    pub fn fanout(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Interval membership; a value on a boundary belongs to the lower partition.
    pub fn interval_of(&self, value: f64) -> usize {
        self.boundaries.partition_point(|b| *b < value)
    }

    /// Partition whose center is nearest to `value`, ties toward the lower index.
    pub fn locate(&self, value: f64) -> usize {
        nearest_center(&self.centers, value)
    }

    /// The `n` partitions with centers closest to `value`, nearest first.
    pub fn nearest(&self, value: f64, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.centers.len()).collect();
        order.sort_by(|&a, &b| {
            let da = (self.centers[a] - value).abs();
            let db = (self.centers[b] - value).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        order.truncate(n);
        order
    }

    /// The `n` partitions whose intervals lie closest to `value`; the
    /// interval containing `value` comes first.
    pub fn nearest_intervals(&self, value: f64, n: usize) -> Vec<usize> {
        let b = &self.boundaries;
        let gap = |i: usize| {
            let lo = if i == 0 { f64::NEG_INFINITY } else { b[i - 1] };
            let hi = if i == b.len() { f64::INFINITY } else { b[i] };
            if value < lo {
                lo - value
            } else if value > hi {
                value - hi
            } else {
                0.0
            }
        };
        let home = self.interval_of(value);
        let mut order: Vec<usize> = (0..=b.len()).collect();
        order.sort_by(|&x, &y| {
            (x != home)
                .cmp(&(y != home))
                .then(gap(x).total_cmp(&gap(y)))
                .then(x.cmp(&y))
        });
        order.truncate(n);
        order
    }
}

fn compute_centers(boundaries: &[f64], min: f64, max: f64) -> Vec<f64> {
    if boundaries.is_empty() {
        return vec![(min + max) / 2.0];
    }
    let mut centers = Vec::with_capacity(boundaries.len() + 1);
    let lo = min.min(boundaries[0]);
    centers.push((lo + boundaries[0]) / 2.0);
    for w in boundaries.windows(2) {
        centers.push((w[0] + w[1]) / 2.0);
    }
    let last = *boundaries.last().unwrap();
    centers.push((last + max.max(last)) / 2.0);
    centers
}

fn nearest_center(centers: &[f64], value: f64) -> usize {
    if centers.len() <= 1 || value.is_nan() {
        return 0;
    }
    // Centers are non-decreasing, so the nearest one is adjacent to the
    // insertion point of `value`.
    let j = centers.partition_point(|c| *c < value);
    let mut best = if j == 0 {
        0
    } else if j == centers.len() {
        j - 1
    } else {
        let below = value - centers[j - 1];
        let above = centers[j] - value;
        if below <= above {
            j - 1
        } else {
            j
        }
    };
    while best > 0 && centers[best - 1] == centers[best] {
        best -= 1;
    }
    best
}

fn check_fanout(values: &[f64], fanout: usize) -> Result<()> {
    if values.is_empty() {
        return Err(invalid("cannot partition an empty value set"));
    }
    if !(MIN_FANOUT..=MAX_FANOUT).contains(&fanout) {
        return Err(invalid(format!(
            "fanout {fanout} outside [{MIN_FANOUT}, {MAX_FANOUT}]"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("projected values must be finite"));
    }
    Ok(())
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Cuts `[min(values), max(values)]` into `fanout` intervals of equal width.
pub fn equal_distance_boundaries(values: &[f64], fanout: usize) -> Result<PartitionSpec> {
    check_fanout(values, fanout)?;
    equal_distance_unchecked(values, fanout)
}

pub(crate) fn equal_distance_unchecked(values: &[f64], fanout: usize) -> Result<PartitionSpec> {
    let (min, max) = min_max(values);
    let width = (max - min) / fanout as f64;
    if !(width > 0.0) {
        return Err(Error::DegenerateRange);
    }
    let boundaries: Vec<f64> = (1..fanout).map(|i| min + width * i as f64).collect();
    if boundaries.windows(2).any(|w| !(w[0] < w[1])) || boundaries[0] <= min {
        return Err(Error::DegenerateRange);
    }
    PartitionSpec::from_parts(boundaries, PartitionStrategy::EqualDistance, min, max)
}

/// Cuts at order statistics so partition sizes differ by at most one.
///
/// When several cut points fall inside a run of identical values the
/// duplicate boundaries are merged, so the result can have fewer partitions
/// than requested (a single partition for constant input).
pub fn equal_cardinality_boundaries(values: &[f64], fanout: usize) -> Result<PartitionSpec> {
    check_fanout(values, fanout)?;
    Ok(cardinality_split(values, fanout))
}

/// Equal-cardinality split into `parts` (1..=8) partitions; no range checks.
pub(crate) fn cardinality_split(values: &[f64], parts: usize) -> PartitionSpec {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    cardinality_split_sorted(&sorted, parts)
}

pub(crate) fn cardinality_split_sorted(sorted: &[f64], parts: usize) -> PartitionSpec {
    let n = sorted.len();
    if n == 0 {
        return PartitionSpec::single(0.0, 0.0);
    }
    let (min, max) = (sorted[0], sorted[n - 1]);
    let parts = parts.clamp(1, MAX_FANOUT).min(n);
    let base = n / parts;
    let rem = n % parts;
    let mut boundaries: Vec<f64> = Vec::with_capacity(parts - 1);
    for i in 1..parts {
        let end = i * base + i.min(rem);
        let (a, b) = (sorted[end - 1], sorted[end]);
        let mid = a + (b - a) / 2.0;
        let cut = if mid < b { mid } else { a };
        if boundaries.last().map_or(true, |&last| cut > last) {
            boundaries.push(cut);
        }
    }
    // Drop boundaries that leave a partition empty.
    loop {
        let counts = interval_counts(sorted, &boundaries);
        match counts.iter().position(|&c| c == 0) {
            None => break,
            Some(i) => {
                let remove = if i < boundaries.len() { i } else { i - 1 };
                boundaries.remove(remove);
            }
        }
    }
    PartitionSpec::from_parts(boundaries, PartitionStrategy::EqualCardinality, min, max)
        .expect("cardinality cuts are strictly increasing")
}

fn interval_counts(sorted: &[f64], boundaries: &[f64]) -> Vec<usize> {
    let mut counts = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for b in boundaries {
        let end = sorted.partition_point(|v| v <= b);
        counts.push(end - start);
        start = end;
    }
    counts.push(sorted.len() - start);
    counts
}

/// Nearest-center partition of `value` under `spec`.
pub fn locate_partition(spec: &PartitionSpec, value: f64) -> usize {
    spec.locate(value)
}
