//! The ensemble index: several independently seeded trees behind a
//! transactional insert path, with rank aggregation and media bookkeeping.

mod aggregate;
mod pipeline;
mod registry;

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use aggregate::{borda, rank_votes, AggregatedHit, AggregatedResult, MediaVote};
pub use registry::Registry;

use crate::error::{invalid, Error, Result};
use crate::fault;
use crate::geometry::{derive_seed, Vector};
use crate::tree::{Neighbor, NvTree, TreeParams, TreePaths};
use crate::txn::checkpoint::{list_checkpoints, write_checkpoint, CheckpointImage, MediaEntry};
use crate::txn::log::{LogRecord, LogWriter, MediaOp, Tid};
use crate::txn::recovery::{
    recover, RecoveryInput, RecoveryReport, GLOBAL_LOG_OWNER, GLOBAL_LOG_PREFIX,
};
use crate::txn::Snapshot;
use pipeline::{run_pipeline, InFlight, JobKind, Msg, Shared, Tracker, View};

const MANIFEST: &str = "MANIFEST.json";

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    pub dim: usize,
    pub trees: usize,
    pub seed: u64,
    pub params: TreeParams,
    /// Checkpoint after this many submitted transactions.
    pub checkpoint_every: u64,
    /// ...or after this many log bytes, whichever comes first.
    pub checkpoint_log_bytes: u64,
    pub data_dir: PathBuf,
    pub log_dir: PathBuf,
}

impl IndexConfig {
    pub fn new(data_dir: impl Into<PathBuf>, dim: usize) -> Self {
        let data_dir = data_dir.into();
        Self {
            dim,
            trees: 3,
            seed: 0,
            params: TreeParams::default(),
            checkpoint_every: 64,
            checkpoint_log_bytes: 256 << 20,
            log_dir: data_dir.join("wal"),
            data_dir,
        }
    }

    pub fn tree_seeds(&self) -> Vec<u64> {
        (0..self.trees as u64)
            .map(|t| derive_seed(self.seed, t))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        if self.trees == 0 {
            return Err(invalid("an ensemble needs at least one tree"));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid("checkpoint interval must be at least 1"));
        }
        self.params.validate()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    dim: usize,
    trees: usize,
    seed: u64,
    fanout_min: usize,
    fanout_max: usize,
    fill_target: f64,
    cache_groups: u64,
    checkpoint_every: u64,
    checkpoint_log_bytes: u64,
    /// Relative to the data directory when the log lives inside it.
    log_dir: PathBuf,
}

impl Manifest {
    fn of(c: &IndexConfig) -> Self {
        Self {
            format: 1,
            dim: c.dim,
            trees: c.trees,
            seed: c.seed,
            fanout_min: c.params.fanout_min,
            fanout_max: c.params.fanout_max,
            fill_target: c.params.fill_target,
            cache_groups: c.params.cache_groups.min(u64::MAX as usize) as u64,
            checkpoint_every: c.checkpoint_every,
            checkpoint_log_bytes: c.checkpoint_log_bytes,
            log_dir: c
                .log_dir
                .strip_prefix(&c.data_dir)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| c.log_dir.clone()),
        }
    }

    fn config(&self, data_dir: &Path) -> IndexConfig {
        IndexConfig {
            dim: self.dim,
            trees: self.trees,
            seed: self.seed,
            params: TreeParams {
                fanout_min: self.fanout_min,
                fanout_max: self.fanout_max,
                fill_target: self.fill_target,
                cache_groups: usize::try_from(self.cache_groups).unwrap_or(usize::MAX),
            },
            checkpoint_every: self.checkpoint_every,
            checkpoint_log_bytes: self.checkpoint_log_bytes,
            data_dir: data_dir.to_path_buf(),
            log_dir: data_dir.join(&self.log_dir),
        }
    }
}

/// Read the configuration stored with an index.
pub fn read_config(data_dir: &Path) -> Result<IndexConfig> {
    let text = fs::read_to_string(data_dir.join(MANIFEST))
        .map_err(|e| Error::NotFound(format!("no index at {}: {e}", data_dir.display())))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Corruption(format!("bad manifest: {e}")))?;
    Ok(m.config(data_dir))
}

/// Settings that may differ from the stored configuration when reopening.
#[derive(Debug, Clone, Default)]
pub struct OpenOptions {
    pub cache_groups: Option<usize>,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_log_bytes: Option<u64>,
}

struct Admission {
    next_tid: Tid,
    next_id: u64,
    last_submitted: Tid,
    checkpoint_id: u64,
    since_checkpoint: u64,
    log_mark: u64,
    /// Log start positions of the newest published checkpoint.
    global_start: u64,
    tree_starts: Vec<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct IndexStats {
    pub committed_tid: Tid,
    pub media: usize,
    pub vectors_per_tree: Vec<usize>,
    pub group_fetches: Vec<u64>,
    pub disk_reads: Vec<u64>,
    pub splits: Vec<u64>,
    pub leaf_file_bytes: Vec<u64>,
    pub cached_groups: Vec<usize>,
}

pub struct EnsembleIndex {
    config: IndexConfig,
    shared: Arc<Shared>,
    admission: Mutex<Admission>,
    senders: Vec<Sender<Msg>>,
    workers: Vec<JoinHandle<()>>,
    recovery: Option<RecoveryReport>,
    resumed: Vec<u64>,
    closed: bool,
}

impl EnsembleIndex {
    /// Creates an empty index in `config.data_dir`.
    pub fn create(config: IndexConfig) -> Result<Self> {
        Self::bulk_load(config, Vec::new(), &[])
    }

    /// Creates an index over `vectors`, which become committed data. `media`
    /// ranges must refer to the supplied ids.
    pub fn bulk_load(
        config: IndexConfig,
        vectors: Vec<Vector>,
        media: &[MediaEntry],
    ) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(&config.data_dir)?;
        fs::create_dir_all(&config.log_dir)?;
        let manifest_path = config.data_dir.join(MANIFEST);
        if manifest_path.exists() {
            return Err(invalid(format!(
                "an index already exists at {}",
                config.data_dir.display()
            )));
        }
        let id_limit = vectors.iter().map(|v| v.id + 1).max().unwrap_or(0);
        for m in media {
            if m.start > m.end || m.end > id_limit {
                return Err(invalid(format!(
                    "media {} has an invalid id range",
                    m.media
                )));
            }
        }
        let seeds = config.tree_seeds();
        let built: Vec<Result<NvTree>> = thread::scope(|s| {
            let handles: Vec<_> = seeds
                .iter()
                .enumerate()
                .map(|(t, &seed)| {
                    let config = &config;
                    let vectors = &vectors;
                    s.spawn(move || {
                        let paths = TreePaths::new(&config.data_dir, &config.log_dir, t as u32);
                        NvTree::bulk_build(
                            &paths,
                            t as u32,
                            config.dim,
                            seed,
                            config.params.clone(),
                            vectors,
                        )
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("build thread panicked"))
                .collect()
        });
        let trees = built.into_iter().collect::<Result<Vec<_>>>()?;
        drop(vectors);
        let global_log =
            LogWriter::create(&config.log_dir, GLOBAL_LOG_PREFIX, GLOBAL_LOG_OWNER, 0)?;
        let registry = Registry::from_entries(media, &[]);
        let n = trees.len();
        let index = Self::start(
            config,
            trees,
            global_log,
            registry,
            0,
            id_limit,
            Admission {
                next_tid: 1,
                next_id: id_limit,
                last_submitted: 0,
                checkpoint_id: 0,
                since_checkpoint: 0,
                log_mark: 0,
                global_start: 0,
                tree_starts: vec![0; n],
            },
            None,
        );
        index.checkpoint()?;
        fs::write(
            &manifest_path,
            serde_json::to_vec_pretty(&Manifest::of(&index.config)).unwrap(),
        )?;
        crate::txn::log::sync_dir(&index.config.data_dir)?;
        Ok(index)
    }

    pub fn open(data_dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(data_dir, &OpenOptions::default())
    }

    /// Opens an existing index, running crash recovery first.
    pub fn open_with(data_dir: impl AsRef<Path>, opts: &OpenOptions) -> Result<Self> {
        let mut config = read_config(data_dir.as_ref())?;
        if let Some(c) = opts.cache_groups {
            config.params.cache_groups = c;
        }
        if let Some(c) = opts.checkpoint_every {
            config.checkpoint_every = c;
        }
        if let Some(b) = opts.checkpoint_log_bytes {
            config.checkpoint_log_bytes = b;
        }
        config.validate()?;
        let rec = recover(&RecoveryInput {
            data_dir: config.data_dir.clone(),
            log_dir: config.log_dir.clone(),
            dim: config.dim,
            tree_seeds: config.tree_seeds(),
            params: config.params.clone(),
        })?;
        tracing::info!(
            checkpoint = ?rec.report.checkpoint,
            committed = rec.committed_tid,
            redone = rec.report.inserts_redone,
            "recovered"
        );
        let checkpoint_id = list_checkpoints(&config.data_dir)?
            .first()
            .copied()
            .unwrap_or(0);
        let (global_start, tree_starts) = match &rec.base {
            Some(b) => (
                b.global_log_start,
                b.trees.iter().map(|t| t.log_start).collect(),
            ),
            None => (0, vec![0; config.trees]),
        };
        let registry = Registry::from_entries(&rec.media, &rec.deleting);
        let pending_deletes = registry.deleting();
        let mut index = Self::start(
            config,
            rec.trees,
            rec.global_log,
            registry,
            rec.committed_tid,
            rec.id_limit,
            Admission {
                next_tid: rec.next_tid,
                next_id: rec.id_limit,
                last_submitted: rec.committed_tid,
                checkpoint_id,
                since_checkpoint: 0,
                log_mark: 0,
                global_start,
                tree_starts,
            },
            Some(rec.report),
        );
        index.checkpoint()?;
        for &m in &pending_deletes {
            let tid = {
                let mut adm = index.admission.lock();
                index.submit_delete(&mut adm, m)?
            };
            index.wait_for(tid)?;
        }
        index.resumed = pending_deletes;
        Ok(index)
    }

    #[allow(clippy::too_many_arguments)]
    fn start(
        config: IndexConfig,
        trees: Vec<NvTree>,
        global_log: LogWriter,
        registry: Registry,
        committed: Tid,
        id_limit: u64,
        admission: Admission,
        recovery: Option<RecoveryReport>,
    ) -> Self {
        let mut view = View {
            snapshot: Snapshot {
                horizon: committed,
                id_limit,
                deleted: Arc::new(Vec::new()),
            },
            registry,
        };
        view.refresh_deleted();
        let shared = Arc::new(Shared {
            trees: trees.into_iter().map(Arc::new).collect(),
            tracker: Mutex::new(Tracker {
                committed,
                ..Tracker::default()
            }),
            committed_cv: Condvar::new(),
            global_log: Mutex::new(global_log),
            view: RwLock::new(view),
        });
        let mut senders = Vec::new();
        let mut workers = Vec::new();
        for t in 0..shared.trees.len() {
            let (tx, rx) = channel();
            let sh = Arc::clone(&shared);
            senders.push(tx);
            workers.push(
                thread::Builder::new()
                    .name(format!("nvt-pipeline-{t}"))
                    .spawn(move || run_pipeline(sh, t, rx))
                    .expect("spawn pipeline thread"),
            );
        }
        Self {
            config,
            shared,
            admission: Mutex::new(admission),
            senders,
            workers,
            recovery,
            resumed: Vec::new(),
            closed: false,
        }
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn trees(&self) -> &[Arc<NvTree>] {
        &self.shared.trees
    }

    pub fn recovery_report(&self) -> Option<&RecoveryReport> {
        self.recovery.as_ref()
    }

    /// Media whose interrupted deletion was completed while opening.
    pub fn resumed_deletions(&self) -> &[u64] {
        &self.resumed
    }

    pub fn committed_tid(&self) -> Tid {
        self.shared.tracker.lock().committed
    }

    /// Committed TIDs in the order their commit records were written.
    pub fn commit_order(&self) -> Vec<Tid> {
        self.shared.tracker.lock().commit_order.clone()
    }

    pub fn snapshot_now(&self) -> Snapshot {
        self.shared.view.read().snapshot.clone()
    }

    pub fn wait_for(&self, tid: Tid) -> Result<()> {
        self.shared.wait_for(tid)
    }

    fn submit(
        &self,
        adm: &mut Admission,
        kind: JobKind,
        media: MediaOp,
        inserted: Option<Range<u64>>,
    ) -> Result<Tid> {
        if self.closed {
            return Err(Error::Closed);
        }
        self.shared.check_failed()?;
        let tid = adm.next_tid;
        adm.next_tid += 1;
        self.shared.tracker.lock().in_flight.insert(
            tid,
            InFlight {
                done: 0,
                id_end: adm.next_id,
                media,
                inserted,
            },
        );
        for tx in &self.senders {
            tx.send(Msg::Job(tid, kind.clone()))
                .map_err(|_| Error::Closed)?;
        }
        adm.last_submitted = tid;
        adm.since_checkpoint += 1;
        Ok(tid)
    }

    fn allocate(
        &self,
        adm: &mut Admission,
        batch: Vec<Vec<f32>>,
    ) -> Result<(Vec<Vector>, Range<u64>)> {
        let start = adm.next_id;
        let vectors = batch
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                if c.len() != self.config.dim {
                    return Err(invalid(format!(
                        "vector has dimension {}, expected {}",
                        c.len(),
                        self.config.dim
                    )));
                }
                Vector::new(start + i as u64, c)
            })
            .collect::<Result<Vec<_>>>()?;
        let range = start..start + vectors.len() as u64;
        adm.next_id = range.end;
        Ok((vectors, range))
    }

    fn maybe_checkpoint(&self, adm: &mut Admission) -> Result<()> {
        let bytes = self.log_bytes().saturating_sub(adm.log_mark);
        if adm.since_checkpoint >= self.config.checkpoint_every
            || bytes >= self.config.checkpoint_log_bytes
        {
            self.checkpoint_locked(adm)?;
        }
        Ok(())
    }

    fn log_bytes(&self) -> u64 {
        let trees: u64 = self.shared.trees.iter().map(|t| t.log_bytes()).sum();
        trees + self.shared.global_log.lock().bytes_written()
    }

    /// Queues a batch of new vectors; returns the TID and the ids assigned.
    pub fn submit_vectors(&self, batch: Vec<Vec<f32>>) -> Result<(Tid, Range<u64>)> {
        let mut adm = self.admission.lock();
        let (vectors, range) = self.allocate(&mut adm, batch)?;
        let tid = self.submit(
            &mut adm,
            JobKind::Insert(Arc::new(vectors)),
            MediaOp::None,
            Some(range.clone()),
        )?;
        self.maybe_checkpoint(&mut adm)?;
        Ok((tid, range))
    }

    /// Inserts a batch and waits for it to commit.
    pub fn insert_vectors(&self, batch: Vec<Vec<f32>>) -> Result<(Tid, Range<u64>)> {
        let (tid, range) = self.submit_vectors(batch)?;
        self.wait_for(tid)?;
        Ok((tid, range))
    }

    fn media_busy(&self, media: u64) -> bool {
        self.shared
            .tracker
            .lock()
            .in_flight
            .values()
            .any(|f| match f.media {
                MediaOp::Inserted { media: m, .. } | MediaOp::Deleted { media: m } => m == media,
                MediaOp::None => false,
            })
    }

    fn submit_media(
        &self,
        adm: &mut Admission,
        media: u64,
        descriptors: Vec<Vec<f32>>,
    ) -> Result<Tid> {
        let (vectors, range) = self.allocate(adm, descriptors)?;
        self.submit(
            adm,
            JobKind::Insert(Arc::new(vectors)),
            MediaOp::Inserted {
                media,
                start: range.start,
                end: range.end,
            },
            Some(range),
        )
    }

    /// Inserts all descriptors of a new media item as one transaction.
    pub fn insert_media(&self, media: u64, descriptors: Vec<Vec<f32>>) -> Result<Tid> {
        let tid = {
            let mut adm = self.admission.lock();
            if self.shared.view.read().registry.contains(media) || self.media_busy(media) {
                return Err(Error::DuplicateMedia(media));
            }
            let tid = self.submit_media(&mut adm, media, descriptors)?;
            self.maybe_checkpoint(&mut adm)?;
            tid
        };
        self.wait_for(tid)?;
        Ok(tid)
    }

    fn submit_delete(&self, adm: &mut Admission, media: u64) -> Result<Tid> {
        let range = {
            let mut view = self.shared.view.write();
            let range = view
                .registry
                .range(media)
                .ok_or(Error::UnknownMedia(media))?;
            view.registry.mark_deleting(media);
            view.refresh_deleted();
            range
        };
        let ids: Vec<u64> = range.collect();
        self.submit(
            adm,
            JobKind::Delete(Arc::new(ids)),
            MediaOp::Deleted { media },
            None,
        )
    }

    fn announce_delete(&self, adm: &Admission, media: u64) -> Result<()> {
        {
            let view = self.shared.view.read();
            if !view.registry.contains(media) {
                return Err(Error::UnknownMedia(media));
            }
            if view.registry.is_deleting(media) || self.media_busy(media) {
                return Err(invalid(format!("media {media} is already being changed")));
            }
        }
        let mut g = self.shared.global_log.lock();
        g.append(&LogRecord::DeleteIntent {
            tid: adm.next_tid,
            media,
        });
        g.flush()?;
        fault::hit("delete-intent-after-log");
        Ok(())
    }

    /// Removes every descriptor of `media`. The media is hidden from readers
    /// as soon as the deletion intent is durable.
    pub fn delete_media(&self, media: u64) -> Result<Tid> {
        let tid = {
            let mut adm = self.admission.lock();
            self.announce_delete(&adm, media)?;
            let tid = self.submit_delete(&mut adm, media)?;
            self.maybe_checkpoint(&mut adm)?;
            tid
        };
        self.wait_for(tid)?;
        Ok(tid)
    }

    /// Replaces the descriptors of `media`: a delete followed by an insert
    /// under consecutive TIDs. Returns the insert's TID.
    pub fn update_media(&self, media: u64, descriptors: Vec<Vec<f32>>) -> Result<Tid> {
        let tid = {
            let mut adm = self.admission.lock();
            for d in &descriptors {
                if d.len() != self.config.dim {
                    return Err(invalid(format!(
                        "vector has dimension {}, expected {}",
                        d.len(),
                        self.config.dim
                    )));
                }
            }
            self.announce_delete(&adm, media)?;
            self.submit_delete(&mut adm, media)?;
            let tid = self.submit_media(&mut adm, media, descriptors)?;
            self.maybe_checkpoint(&mut adm)?;
            tid
        };
        self.wait_for(tid)?;
        Ok(tid)
    }

    pub fn media_range(&self, media: u64) -> Option<Range<u64>> {
        self.shared.view.read().registry.range(media)
    }

    pub fn media_of(&self, id: u64) -> Option<u64> {
        self.shared.view.read().registry.media_of(id)
    }

    pub fn media_count(&self) -> usize {
        self.shared.view.read().registry.len()
    }

    /// k-NN in one tree under `snapshot`.
    pub fn search_tree(
        &self,
        tree: usize,
        q: &[f32],
        k: usize,
        snapshot: &Snapshot,
    ) -> Result<Vec<Neighbor>> {
        let t = self
            .shared
            .trees
            .get(tree)
            .ok_or_else(|| invalid(format!("no tree {tree}")))?;
        t.search(q, k, snapshot)
    }

    pub fn ensemble_search(&self, q: &[f32], k: usize) -> Result<AggregatedResult> {
        self.ensemble_search_at(q, k, &self.snapshot_now())
    }

    /// Queries every tree under one snapshot and aggregates by Borda count.
    pub fn ensemble_search_at(
        &self,
        q: &[f32],
        k: usize,
        snapshot: &Snapshot,
    ) -> Result<AggregatedResult> {
        let per_tree = self
            .shared
            .trees
            .iter()
            .map(|t| t.search(q, k, snapshot))
            .collect::<Result<Vec<_>>>()?;
        Ok(borda(&per_tree, k))
    }

    /// Each descriptor's ensemble neighbors vote for the media owning them.
    pub fn media_query(&self, descriptors: &[Vec<f32>], k: usize) -> Result<Vec<MediaVote>> {
        if descriptors.is_empty() {
            return Err(invalid("media query needs at least one descriptor"));
        }
        let snapshot = self.snapshot_now();
        let mut votes: HashMap<u64, u64> = HashMap::new();
        for d in descriptors {
            let result = self.ensemble_search_at(d, k, &snapshot)?;
            let view = self.shared.view.read();
            for hit in &result.hits {
                if let Some(m) = view.registry.media_of(hit.id) {
                    *votes.entry(m).or_default() += 1;
                }
            }
        }
        let view = self.shared.view.read();
        votes.retain(|m, _| !view.registry.is_deleting(*m));
        Ok(rank_votes(votes))
    }

    /// Drains all submitted work and publishes a checkpoint. Returns its id.
    pub fn checkpoint(&self) -> Result<u64> {
        let mut adm = self.admission.lock();
        self.checkpoint_locked(&mut adm)
    }

    fn checkpoint_locked(&self, adm: &mut Admission) -> Result<u64> {
        self.wait_for(adm.last_submitted)?;
        let id = adm.checkpoint_id + 1;
        let global_start = self.shared.global_log.lock().rotate()?;
        let trees = self
            .shared
            .trees
            .iter()
            .map(|t| t.checkpoint_prepare())
            .collect::<Result<Vec<_>>>()?;
        let image = {
            let view = self.shared.view.read();
            CheckpointImage {
                id,
                last_tid: self.committed_tid(),
                id_limit: view.snapshot.id_limit.max(adm.next_id),
                global_log_start: global_start,
                trees,
                media: view.registry.entries(),
                deleting: view.registry.deleting(),
            }
        };
        {
            let mut g = self.shared.global_log.lock();
            g.append(&LogRecord::CheckpointMark { checkpoint: id });
            g.flush()?;
        }
        write_checkpoint(&self.config.data_dir, &image)?;
        // Logs are kept back to the previous image so that it stays usable.
        for (t, tree) in self.shared.trees.iter().enumerate() {
            tree.checkpoint_published(&image.trees[t], adm.tree_starts[t])?;
        }
        self.shared
            .global_log
            .lock()
            .truncate_before(adm.global_start)?;
        adm.global_start = global_start;
        adm.tree_starts = image.trees.iter().map(|t| t.log_start).collect();
        adm.checkpoint_id = id;
        adm.since_checkpoint = 0;
        adm.log_mark = self.log_bytes();
        Ok(id)
    }

    pub fn stats(&self) -> IndexStats {
        let trees = &self.shared.trees;
        IndexStats {
            committed_tid: self.committed_tid(),
            media: self.media_count(),
            vectors_per_tree: trees.iter().map(|t| t.len()).collect(),
            group_fetches: trees.iter().map(|t| t.group_fetches()).collect(),
            disk_reads: trees.iter().map(|t| t.disk_reads()).collect(),
            splits: trees
                .iter()
                .map(|t| t.stats().splits.load(std::sync::atomic::Ordering::Relaxed))
                .collect(),
            leaf_file_bytes: trees.iter().map(|t| t.leaf_file_size()).collect(),
            cached_groups: trees.iter().map(|t| t.cached_groups()).collect(),
        }
    }

    /// Writes a final checkpoint and stops the pipelines.
    pub fn close(mut self) -> Result<()> {
        let r = self.checkpoint().map(|_| ());
        self.stop();
        r
    }

    fn stop(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        for tx in &self.senders {
            let _ = tx.send(Msg::Stop);
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for EnsembleIndex {
    fn drop(&mut self) {
        self.stop();
    }
}
