//! Crash recovery: adopt the latest checkpoint, then redo the committed
//! suffix of the logs in four ordered phases.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::geometry::Vector;
use crate::tree::image::SplitImage;
use crate::tree::{NvTree, TreeImage, TreeParams, TreePaths};
use crate::txn::checkpoint::{load_latest, CheckpointImage, MediaEntry};
use crate::txn::log::{scan_log, LogRecord, LogWriter, MediaOp, Tid};

pub const GLOBAL_LOG_PREFIX: &str = "global";
pub const GLOBAL_LOG_OWNER: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct RecoveryInput {
    pub data_dir: PathBuf,
    pub log_dir: PathBuf,
    pub dim: usize,
    pub tree_seeds: Vec<u64>,
    pub params: TreeParams,
}

#[derive(Debug, Clone, Default)]
pub struct RecoveryReport {
    pub checkpoint: Option<u64>,
    pub committed_tid: Tid,
    pub splits_replayed: usize,
    pub uncommitted_removed: usize,
    pub inserts_redone: usize,
    pub deletes_redone: usize,
    pub torn_logs: usize,
    pub elapsed: Duration,
}

pub struct Recovered {
    pub trees: Vec<NvTree>,
    pub global_log: LogWriter,
    pub committed_tid: Tid,
    /// Next TID to hand out; above every TID found in any log.
    pub next_tid: Tid,
    pub id_limit: u64,
    pub media: Vec<MediaEntry>,
    /// Media whose deletion was announced but never committed.
    pub deleting: Vec<u64>,
    /// Checkpoint adopted, with its log start positions.
    pub base: Option<CheckpointImage>,
    pub report: RecoveryReport,
}

/// Single-threaded recovery of every tree and the global state.
pub fn recover(input: &RecoveryInput) -> Result<Recovered> {
    let started = Instant::now();
    let mut report = RecoveryReport::default();
    let base = load_latest(&input.data_dir)?;
    report.checkpoint = base.as_ref().map(|c| c.id);
    if let Some(b) = &base {
        if b.trees.len() != input.tree_seeds.len() {
            return Err(Error::Corruption(format!(
                "checkpoint has {} trees, configuration has {}",
                b.trees.len(),
                input.tree_seeds.len()
            )));
        }
    }

    // Global log: commit decisions and media bookkeeping.
    let global_start = base.as_ref().map_or(0, |b| b.global_log_start);
    let gscan = scan_log(
        &input.log_dir,
        GLOBAL_LOG_PREFIX,
        GLOBAL_LOG_OWNER,
        global_start,
    )?;
    if gscan.truncated {
        report.torn_logs += 1;
    }
    let mut committed_tid = base.as_ref().map_or(0, |b| b.last_tid);
    let mut id_limit = base.as_ref().map_or(0, |b| b.id_limit);
    let mut max_tid = committed_tid;
    let mut media: BTreeMap<u64, MediaEntry> = base
        .as_ref()
        .map(|b| b.media.iter().map(|m| (m.media, m.clone())).collect())
        .unwrap_or_default();
    let mut deleting: BTreeSet<u64> = base
        .as_ref()
        .map(|b| b.deleting.iter().copied().collect())
        .unwrap_or_default();
    let mut committed: HashSet<Tid> = HashSet::new();
    for (_, rec) in &gscan.records {
        if let Some(t) = rec.tid() {
            max_tid = max_tid.max(t);
        }
        match rec {
            LogRecord::Commit {
                tid,
                id_end,
                media: op,
            } => {
                committed.insert(*tid);
                committed_tid = committed_tid.max(*tid);
                id_limit = id_limit.max(*id_end);
                match op {
                    MediaOp::None => {}
                    MediaOp::Inserted {
                        media: m,
                        start,
                        end,
                    } => {
                        media.insert(
                            *m,
                            MediaEntry {
                                media: *m,
                                start: *start,
                                end: *end,
                            },
                        );
                    }
                    MediaOp::Deleted { media: m } => {
                        media.remove(m);
                        deleting.remove(m);
                    }
                }
            }
            LogRecord::DeleteIntent { media: m, .. } => {
                deleting.insert(*m);
            }
            _ => {}
        }
    }
    // Intents whose deletion committed later in the log were removed above;
    // an intent logged after its commit cannot happen.
    let is_committed =
        |t: Tid| committed.contains(&t) || base.as_ref().is_some_and(|b| t <= b.last_tid);
    let global_log =
        LogWriter::resume(&input.log_dir, GLOBAL_LOG_PREFIX, GLOBAL_LOG_OWNER, &gscan)?;

    let mut trees = Vec::with_capacity(input.tree_seeds.len());
    for (t, &seed) in input.tree_seeds.iter().enumerate() {
        let t32 = t as u32;
        let paths = TreePaths::new(&input.data_dir, &input.log_dir, t32);
        let image: Option<&TreeImage> = base.as_ref().map(|b| &b.trees[t]);
        let scan = scan_log(
            &input.log_dir,
            &paths.log_prefix,
            t32,
            image.map_or(0, |i| i.log_start),
        )?;
        if scan.truncated {
            report.torn_logs += 1;
        }
        let log = LogWriter::resume(&input.log_dir, &paths.log_prefix, t32, &scan)?;
        // Phase 1: adopt the checkpoint, or start from an empty tree.
        let tree = match image {
            Some(img) => {
                NvTree::open(&paths, t32, input.dim, seed, input.params.clone(), img, log)?
            }
            None => {
                for p in [&paths.leaf_file, &paths.feature_file] {
                    if p.exists() {
                        fs::remove_file(p)?;
                    }
                }
                NvTree::build_with_log(
                    &paths,
                    t32,
                    input.dim,
                    seed,
                    input.params.clone(),
                    &[],
                    log,
                )?
            }
        };
        tree.set_recovering(true);
        let mut log_vectors: HashMap<u64, Vector> = HashMap::new();
        for (_, rec) in &scan.records {
            if let Some(tid) = rec.tid() {
                max_tid = max_tid.max(tid);
            }
            match rec {
                LogRecord::InsertVector { tid, vector } if is_committed(*tid) => {
                    log_vectors.insert(vector.id, vector.clone());
                }
                _ => {}
            }
        }
        // Phase 2: committed splits, in log order.
        for (_, rec) in &scan.records {
            if let LogRecord::Split {
                tid,
                old_group,
                payload,
                ..
            } = rec
            {
                if is_committed(*tid) {
                    let img = SplitImage::decode(payload, input.dim)?;
                    tree.replay_split(*old_group, img, &log_vectors)?;
                    report.splits_replayed += 1;
                }
            }
        }
        // Phase 3: entries of uncommitted transactions.
        report.uncommitted_removed += tree.remove_uncommitted(id_limit)?;
        // Phase 4: committed inserts and deletes not yet reflected.
        for (_, rec) in &scan.records {
            match rec {
                LogRecord::InsertVector { tid, vector } if is_committed(*tid) => {
                    if tree.redo_insert(vector)? {
                        report.inserts_redone += 1;
                    }
                }
                LogRecord::DeleteVector { tid, id } if is_committed(*tid) => {
                    if tree.delete_one(*id)? {
                        report.deletes_redone += 1;
                    }
                }
                _ => {}
            }
        }
        tree.set_recovering(false);
        trees.push(tree);
    }
    report.committed_tid = committed_tid;
    report.elapsed = started.elapsed();
    Ok(Recovered {
        trees,
        global_log,
        committed_tid,
        next_tid: max_tid + 1,
        id_limit,
        media: media.into_values().collect(),
        deleting: deleting.into_iter().collect(),
        base,
        report,
    })
}
