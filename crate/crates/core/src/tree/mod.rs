//! A single NV-tree: inner nodes over leaf-groups, with its leaf file,
//! feature store and tree-local log.

pub(crate) mod build;
pub mod image;
mod insert;
mod pool;
mod search;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{ArcRwLockReadGuard, Mutex, RawRwLock, RwLock};

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    derive_seed, make_line, PartitionSpec, ProjectionLine, Vector, MAX_FANOUT, MIN_FANOUT,
};
use crate::storage::leaf::{LeafGroup, LEAF_CAPACITY, MAX_LEAVES, MAX_LEAVES_PER_NODE, MAX_NODES};
use crate::storage::{FeatureStore, FeatureWatermark, LeafFile, LeafWatermark};
use crate::txn::log::LogWriter;
use crate::txn::Snapshot;

use build::Builder;
use pool::BufferPool;

pub use search::Neighbor;

pub const ROOT_TAG: u64 = 0x524F_4F54;
pub const SPLIT_TAG: u64 = 0x5350_4C54;
pub const FILL_MIN: f64 = 0.50;
pub const FILL_MAX: f64 = 0.85;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeParams {
    pub fanout_min: usize,
    pub fanout_max: usize,
    /// Leaf fill aimed for when building groups.
    pub fill_target: f64,
    /// Leaf-groups kept in memory per tree.
    pub cache_groups: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            fanout_min: MIN_FANOUT,
            fanout_max: MAX_FANOUT,
            fill_target: 0.70,
            cache_groups: usize::MAX,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_FANOUT <= self.fanout_min
            && self.fanout_min <= self.fanout_max
            && self.fanout_max <= MAX_FANOUT)
        {
            return Err(invalid(format!(
                "fanout range [{}, {}] must lie within [{MIN_FANOUT}, {MAX_FANOUT}]",
                self.fanout_min, self.fanout_max
            )));
        }
        if !(FILL_MIN..=FILL_MAX).contains(&self.fill_target) {
            return Err(invalid(format!(
                "fill target {} outside [{FILL_MIN}, {FILL_MAX}]",
                self.fill_target
            )));
        }
        if self.cache_groups == 0 {
            return Err(invalid("cache must hold at least one group"));
        }
        Ok(())
    }

    pub fn leaf_target(&self) -> usize {
        (LEAF_CAPACITY as f64 * self.fill_target).round() as usize
    }

    pub fn leaf_min(&self) -> usize {
        (LEAF_CAPACITY as f64 * FILL_MIN).ceil() as usize
    }

    pub fn leaf_max(&self) -> usize {
        (LEAF_CAPACITY as f64 * FILL_MAX).floor() as usize
    }

    /// Largest partition built as one leaf-group.
    pub fn group_target(&self) -> usize {
        MAX_LEAVES * self.leaf_target()
    }

    /// Largest group that is rebuilt in place instead of split.
    pub fn rebuild_limit(&self) -> usize {
        MAX_LEAVES * self.leaf_max()
    }

    fn fits(&self, n: usize, k: usize) -> bool {
        n / k >= self.leaf_min() && n.div_ceil(k) <= self.leaf_max()
    }

    /// Whether `n` vectors can form a group with every leaf in the fill range.
    pub(crate) fn layout_fits(&self, n: usize) -> bool {
        (1..=MAX_NODES).any(|a| (1..=MAX_LEAVES_PER_NODE).any(|b| self.fits(n, a * b)))
    }

    pub(crate) fn child_size_ok(&self, n: usize) -> bool {
        n > 0 && (n > self.group_target() || self.layout_fits(n))
    }

    /// Internal nodes and leaves per node for a group of `n` vectors.
    pub(crate) fn choose_layout(&self, n: usize) -> (usize, usize) {
        let target = self.leaf_target() as f64;
        let mut best: Option<(f64, usize, usize)> = None;
        for strict in [true, false] {
            for a in 1..=MAX_NODES {
                for b in 1..=MAX_LEAVES_PER_NODE {
                    let k = a * b;
                    let ok = if strict {
                        self.fits(n, k)
                    } else {
                        n.div_ceil(k) <= LEAF_CAPACITY
                    };
                    if !ok {
                        continue;
                    }
                    let dist = (n as f64 / k as f64 - target).abs();
                    let better = match best {
                        None => true,
                        Some((d, ba, bb)) => {
                            dist < d - 1e-9
                                || ((dist - d).abs() <= 1e-9 && (a.min(b), a) > (ba.min(bb), ba))
                        }
                    };
                    if better {
                        best = Some((dist, a, b));
                    }
                }
            }
            if let Some((_, a, b)) = best {
                return (a, b);
            }
        }
        (MAX_NODES, MAX_LEAVES_PER_NODE)
    }

    /// Leaves for one internal node holding `m` vectors.
    pub(crate) fn leaves_for(&self, m: usize) -> usize {
        let target = self.leaf_target() as f64;
        let pick = |ok: &dyn Fn(usize) -> bool| {
            (1..=MAX_LEAVES_PER_NODE)
                .filter(|&b| ok(b))
                .min_by(|&x, &y| {
                    let dx = (m as f64 / x as f64 - target).abs();
                    let dy = (m as f64 / y as f64 - target).abs();
                    dx.total_cmp(&dy)
                })
        };
        pick(&|b| self.fits(m, b))
            .or_else(|| pick(&|b| m.div_ceil(b) <= LEAF_CAPACITY))
            .unwrap_or(MAX_LEAVES_PER_NODE)
    }
}

/// Structure of a subtree without locks; the form stored in images.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Group(u64),
    Inner {
        seed: u64,
        spec: PartitionSpec,
        children: Vec<Shape>,
    },
}

impl Shape {
    pub fn group_ids(&self) -> Vec<u64> {
        let mut out = Vec::new();
        self.collect_groups(&mut out);
        out
    }

    fn collect_groups(&self, out: &mut Vec<u64>) {
        match self {
            Shape::Group(g) => out.push(*g),
            Shape::Inner { children, .. } => children.iter().for_each(|c| c.collect_groups(out)),
        }
    }
}

/// A child reference. The lock around a `Group` child is that group's lock.
#[derive(Debug)]
pub(crate) enum Child {
    Inner(Arc<InnerNode>),
    Group(u64),
}

pub(crate) type Slot = Arc<RwLock<Child>>;

#[derive(Debug)]
pub(crate) struct InnerNode {
    pub seed: u64,
    pub line: ProjectionLine,
    pub spec: PartitionSpec,
    /// Each child's lock lives in its parent.
    pub children: Vec<Slot>,
}

/// Durable description of one tree, stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeImage {
    pub next_group_id: u64,
    pub shape: Shape,
    pub leaves: LeafWatermark,
    pub features: FeatureWatermark,
    /// First tree-log LSN not covered by this image.
    pub log_start: u64,
}

#[derive(Debug, Clone)]
pub struct TreePaths {
    pub leaf_file: PathBuf,
    pub feature_file: PathBuf,
    pub log_dir: PathBuf,
    pub log_prefix: String,
}

impl TreePaths {
    pub fn new(data_dir: &Path, log_dir: &Path, tree: u32) -> Self {
        Self {
            leaf_file: data_dir.join(format!("tree-{tree}.nvl")),
            feature_file: data_dir.join(format!("tree-{tree}.nvf")),
            log_dir: log_dir.to_path_buf(),
            log_prefix: format!("tree-{tree}"),
        }
    }
}

#[derive(Debug, Default)]
pub struct TreeStats {
    pub searches: AtomicU64,
    pub group_fetches: AtomicU64,
    pub splits: AtomicU64,
    pub rebuilds: AtomicU64,
    pub evictions: AtomicU64,
    pub leaf_writes: AtomicU64,
}

#[derive(Debug)]
pub(crate) struct FeatureState {
    pub store: FeatureStore,
    /// Inserted but not yet committed vectors.
    pub pending: HashMap<u64, Vector>,
}

#[derive(Debug)]
pub(crate) struct Meta {
    pub next_gid: u64,
    pub locator: HashMap<u64, u64>,
    pub slots: HashMap<u64, Slot>,
}

#[derive(Debug)]
pub struct NvTree {
    id: u32,
    dim: usize,
    seed: u64,
    params: TreeParams,
    root: Slot,
    pool: Mutex<BufferPool>,
    file: RwLock<LeafFile>,
    features: Mutex<FeatureState>,
    meta: Mutex<Meta>,
    log: Mutex<LogWriter>,
    recovering: AtomicBool,
    stats: TreeStats,
}

impl NvTree {
    /// An empty tree: one empty leaf-group under the root.
    pub fn create(
        paths: &TreePaths,
        id: u32,
        dim: usize,
        seed: u64,
        params: TreeParams,
    ) -> Result<Self> {
        Self::bulk_build(paths, id, dim, seed, params, &[])
    }

    /// Builds a tree over `vectors` and writes its groups and features.
    pub fn bulk_build(
        paths: &TreePaths,
        id: u32,
        dim: usize,
        seed: u64,
        params: TreeParams,
        vectors: &[Vector],
    ) -> Result<Self> {
        let log = LogWriter::create(&paths.log_dir, &paths.log_prefix, id, 0)?;
        Self::build_with_log(paths, id, dim, seed, params, vectors, log)
    }

    pub(crate) fn build_with_log(
        paths: &TreePaths,
        id: u32,
        dim: usize,
        seed: u64,
        params: TreeParams,
        vectors: &[Vector],
        log: LogWriter,
    ) -> Result<Self> {
        params.validate()?;
        if dim == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(invalid(format!(
                "vector {} has dimension {}, expected {dim}",
                v.id,
                v.dim()
            )));
        }
        let mut refs: Vec<&Vector> = vectors.iter().collect();
        refs.sort_by_key(|v| v.id);
        if let Some(w) = refs.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::DuplicateId(w[0].id));
        }
        let mut builder = Builder::new(dim, &params, 0);
        let root_seed = derive_seed(seed, ROOT_TAG);
        let shape = if refs.is_empty() {
            let g = builder.make_group(0, 0, root_seed, &[])?;
            builder.groups.push(g);
            builder.next_gid = 1;
            Shape::Group(0)
        } else {
            builder.build_node(refs, root_seed)?
        };
        let next_gid = builder.next_gid;
        let groups = builder.groups;

        let mut file = LeafFile::create(&paths.leaf_file, id, dim)?;
        let mut store = FeatureStore::create(&paths.feature_file, dim)?;
        let by_id: HashMap<u64, &Vector> = vectors.iter().map(|v| (v.id, v)).collect();
        let mut pool = BufferPool::new(params.cache_groups);
        let mut locator = HashMap::with_capacity(vectors.len());
        for g in groups {
            file.write_leaf_group(&g)?;
            let mut ids = g.ids();
            ids.sort_unstable();
            let feats: Vec<Vector> = ids.iter().map(|i| by_id[i].clone()).collect();
            store.register_group(g.id);
            store.append_features(g.id, &feats)?;
            for i in ids {
                locator.insert(i, g.id);
            }
            if pool.len() < pool.capacity() {
                pool.insert_clean(Arc::new(g));
            }
        }
        Ok(Self::assemble(
            id, dim, seed, params, &shape, file, store, pool, next_gid, locator, log,
        ))
    }

    /// Reopens a tree from a checkpoint image; the caller supplies the resumed log.
    pub fn open(
        paths: &TreePaths,
        id: u32,
        dim: usize,
        seed: u64,
        params: TreeParams,
        image: &TreeImage,
        log: LogWriter,
    ) -> Result<Self> {
        params.validate()?;
        let file = LeafFile::open(&paths.leaf_file, dim, &image.leaves)?;
        let store = FeatureStore::open(&paths.feature_file, dim, &image.features)?;
        let mut pool = BufferPool::new(params.cache_groups);
        let mut locator = HashMap::new();
        for gid in image.shape.group_ids() {
            let g = file.read_leaf_group(gid)?;
            for i in g.ids() {
                locator.insert(i, gid);
            }
            if pool.len() < pool.capacity() {
                pool.insert_clean(Arc::new(g));
            }
        }
        Ok(Self::assemble(
            id,
            dim,
            seed,
            params,
            &image.shape,
            file,
            store,
            pool,
            image.next_group_id,
            locator,
            log,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        id: u32,
        dim: usize,
        seed: u64,
        params: TreeParams,
        shape: &Shape,
        file: LeafFile,
        store: FeatureStore,
        pool: BufferPool,
        next_gid: u64,
        locator: HashMap<u64, u64>,
        log: LogWriter,
    ) -> Self {
        let mut slots = HashMap::new();
        let root = Arc::new(RwLock::new(materialize(shape, dim, &mut slots)));
        if let Shape::Group(g) = shape {
            slots.insert(*g, Arc::clone(&root));
        }
        Self {
            id,
            dim,
            seed,
            params,
            root,
            pool: Mutex::new(pool),
            file: RwLock::new(file),
            features: Mutex::new(FeatureState {
                store,
                pending: HashMap::new(),
            }),
            meta: Mutex::new(Meta {
                next_gid,
                locator,
                slots,
            }),
            log: Mutex::new(log),
            recovering: AtomicBool::new(false),
            stats: TreeStats::default(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    pub fn stats(&self) -> &TreeStats {
        &self.stats
    }

    /// Physical leaf-group reads issued against the leaf file.
    pub fn disk_reads(&self) -> u64 {
        self.file.read().read_count()
    }

    pub fn group_fetches(&self) -> u64 {
        self.stats.group_fetches.load(Ordering::Relaxed)
    }

    pub fn leaf_file_size(&self) -> u64 {
        self.file.read().file_size()
    }

    pub fn set_cache_capacity(&self, groups: usize) {
        self.pool.lock().set_capacity(groups);
    }

    pub fn cached_groups(&self) -> usize {
        self.pool.lock().len()
    }

    /// Number of indexed entries.
    pub fn len(&self) -> usize {
        self.meta.lock().locator.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: u64) -> bool {
        self.meta.lock().locator.contains_key(&id)
    }

    pub fn group_of(&self, id: u64) -> Option<u64> {
        self.meta.lock().locator.get(&id).copied()
    }

    pub fn next_group_id(&self) -> u64 {
        self.meta.lock().next_gid
    }

    /// Lock-coupled descent: the child's read lock is taken before the
    /// parent's is released. Returns holding only the leaf-group lock.
    pub(crate) fn acquire_path(&self, q: &[f32]) -> ArcRwLockReadGuard<RawRwLock, Child> {
        let mut guard = self.root.read_arc();
        loop {
            let next = match &*guard {
                Child::Group(_) => return guard,
                Child::Inner(node) => {
                    let p = node.line.project_unchecked(q);
                    Arc::clone(&node.children[node.spec.locate(p)])
                }
            };
            let child = next.read_arc();
            guard = child;
        }
    }

    /// Group id reached by `q`, taking and releasing the path locks.
    pub fn route(&self, q: &[f32]) -> Result<u64> {
        self.check_dim(q)?;
        let guard = self.acquire_path(q);
        match &*guard {
            Child::Group(g) => Ok(*g),
            Child::Inner(_) => unreachable!("descent ends at a group"),
        }
    }

    fn check_dim(&self, q: &[f32]) -> Result<()> {
        if q.len() != self.dim {
            return Err(invalid(format!(
                "query has dimension {}, expected {}",
                q.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Approximate k nearest neighbors as seen by `snapshot`.
    pub fn search(&self, q: &[f32], k: usize, snapshot: &Snapshot) -> Result<Vec<Neighbor>> {
        self.check_dim(q)?;
        if k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        let guard = self.acquire_path(q);
        let gid = match &*guard {
            Child::Group(g) => *g,
            Child::Inner(_) => unreachable!("descent ends at a group"),
        };
        self.stats.searches.fetch_add(1, Ordering::Relaxed);
        self.stats.group_fetches.fetch_add(1, Ordering::Relaxed);
        let group = self.load_group(gid, true)?;
        let out = search::search_group(&group, q, k, snapshot);
        drop(group);
        drop(guard);
        Ok(out)
    }

    /// Returns the cached group or reads it with one leaf-file read.
    pub(crate) fn load_group(&self, gid: u64, reader: bool) -> Result<Arc<LeafGroup>> {
        if let Some(g) = self.pool.lock().get(gid) {
            return Ok(g);
        }
        let g = Arc::new(self.file.read().read_leaf_group(gid)?);
        let mut pool = self.pool.lock();
        pool.insert_clean(Arc::clone(&g));
        if reader && pool.over_capacity() {
            let cap = pool.capacity();
            for (victim, _) in pool.victims(cap, false) {
                pool.remove(victim);
            }
        }
        Ok(pool.get(gid).unwrap_or(g))
    }

    /// Current structure, read under the node locks.
    pub fn shape(&self) -> Shape {
        shape_of(&self.root.read())
    }

    /// Every indexed id, grouped by leaf-group.
    pub fn group_contents(&self) -> Result<Vec<(u64, Vec<u64>)>> {
        let mut out = Vec::new();
        for gid in self.shape().group_ids() {
            let mut ids = self.load_group(gid, true)?.ids();
            ids.sort_unstable();
            out.push((gid, ids));
        }
        Ok(out)
    }

    /// Leaf sizes of every group, for fill checks.
    pub fn leaf_sizes(&self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for gid in self.shape().group_ids() {
            out.extend(self.load_group(gid, true)?.leaves().map(|l| l.len()));
        }
        Ok(out)
    }

    pub fn fetch_group_features(&self, gid: u64) -> Result<Vec<Vector>> {
        self.features.lock().store.fetch_group_features(gid)
    }
}

fn materialize(shape: &Shape, dim: usize, slots: &mut HashMap<u64, Slot>) -> Child {
    match shape {
        Shape::Group(g) => Child::Group(*g),
        Shape::Inner {
            seed,
            spec,
            children,
        } => {
            let children = children
                .iter()
                .map(|c| {
                    let slot = Arc::new(RwLock::new(materialize(c, dim, slots)));
                    if let Shape::Group(g) = c {
                        slots.insert(*g, Arc::clone(&slot));
                    }
                    slot
                })
                .collect();
            Child::Inner(Arc::new(InnerNode {
                seed: *seed,
                line: make_line(*seed, dim).expect("dimension validated at construction"),
                spec: spec.clone(),
                children,
            }))
        }
    }
}

fn shape_of(child: &Child) -> Shape {
    match child {
        Child::Group(g) => Shape::Group(*g),
        Child::Inner(node) => Shape::Inner {
            seed: node.seed,
            spec: node.spec.clone(),
            children: node.children.iter().map(|c| shape_of(&c.read())).collect(),
        },
    }
}
