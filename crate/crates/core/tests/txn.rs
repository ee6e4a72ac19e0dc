use std::collections::HashSet;
use std::fs;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use nvtree::tree::TreePaths;
use nvtree::txn::checkpoint::list_checkpoints;
use nvtree::{EnsembleIndex, IndexConfig, NvTree, Snapshot, TreeParams, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.0f32..1.0)).collect())
        .collect()
}

fn config(dir: &std::path::Path, dim: usize) -> IndexConfig {
    let mut c = IndexConfig::new(dir.join("idx"), dim);
    c.seed = 5;
    c
}

#[test]
fn fresh_index_snapshot_sees_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let idx = EnsembleIndex::create(config(dir.path(), 4)).unwrap();
    let s = idx.snapshot_now();
    assert_eq!(s.horizon, 0);
    assert!(!s.visible(0));
    assert!(!Snapshot::default().visible(0));
}

#[test]
fn earlier_snapshot_hides_later_commits() {
    let dir = tempfile::tempdir().unwrap();
    let idx = EnsembleIndex::create(config(dir.path(), 8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    idx.insert_vectors(batch(&mut rng, 500, 8)).unwrap();
    let before = idx.snapshot_now();
    let later = batch(&mut rng, 500, 8);
    let (_, range) = idx.insert_vectors(later.clone()).unwrap();
    for q in later.iter().step_by(25) {
        let r = idx.ensemble_search_at(q, 20, &before).unwrap();
        assert!(r.ids().iter().all(|id| !range.contains(id)));
        let now = idx.ensemble_search(q, 20).unwrap();
        assert!(range.contains(&now.hits[0].id));
    }
}

#[test]
fn sequential_transactions_get_consecutive_tids() {
    let dir = tempfile::tempdir().unwrap();
    let idx = EnsembleIndex::create(config(dir.path(), 4)).unwrap();
    let a = idx.insert_vectors(vec![vec![0.0; 4]]).unwrap().0;
    let b = idx.insert_vectors(vec![vec![1.0; 4]]).unwrap().0;
    assert_eq!(b, a + 1);
}

/// Readers run continuously while a writer commits transactions that split
/// groups and delete media. No reader may see an id past its snapshot or an
/// id of a media on the deletion list.
#[test]
fn concurrent_readers_respect_their_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 8);
    cfg.checkpoint_every = 10;
    let idx = Arc::new(EnsembleIndex::create(cfg).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    idx.insert_media(1, batch(&mut rng, 300, 8)).unwrap();
    let doomed = idx.media_range(1).unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let queries = Arc::new(AtomicU64::new(0));
    let readers: Vec<_> = (0..3)
        .map(|r| {
            let idx = Arc::clone(&idx);
            let stop = Arc::clone(&stop);
            let queries = Arc::clone(&queries);
            let doomed = doomed.clone();
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + r);
                let mut violations = 0;
                while !stop.load(Ordering::Relaxed) {
                    let q: Vec<f32> = (0..8).map(|_| rng.gen_range(0.0f32..1.0)).collect();
                    let snap = idx.snapshot_now();
                    let deleting = snap.deleted.iter().any(|r| r.start == doomed.start);
                    for t in 0..3 {
                        for n in idx.search_tree(t, &q, 30, &snap).unwrap() {
                            if n.id >= snap.id_limit || (deleting && doomed.contains(&n.id)) {
                                violations += 1;
                            }
                        }
                    }
                    queries.fetch_add(1, Ordering::Relaxed);
                }
                violations
            })
        })
        .collect();
    for i in 0..40 {
        idx.insert_vectors(batch(&mut rng, 1000, 8)).unwrap();
        if i == 20 {
            idx.delete_media(1).unwrap();
        }
    }
    stop.store(true, Ordering::Relaxed);
    let violations: usize = readers.into_iter().map(|h| h.join().unwrap()).sum();
    assert_eq!(violations, 0);
    assert!(queries.load(Ordering::Relaxed) > 0);
    assert!(idx.stats().splits.iter().all(|&s| s >= 1));
}

#[test]
fn leaf_writes_never_precede_their_log_records() {
    let dir = tempfile::tempdir().unwrap();
    let paths = TreePaths::new(dir.path(), dir.path(), 0);
    let params = TreeParams {
        cache_groups: 2,
        ..TreeParams::default()
    };
    let t = NvTree::create(&paths, 0, 8, 3, params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut writes = 0;
    for id in 0..60_000u64 {
        let v = Vector::new(id, (0..8).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap();
        let lsn = t.log_insert(1, &v);
        t.insert_one(1, v).unwrap();
        t.maintain().unwrap();
        let now = t.stats().leaf_writes.load(Ordering::Relaxed);
        if now > writes {
            assert!(
                t.log_durable_lsn() > lsn,
                "group written before log record {lsn} was durable"
            );
            writes = now;
        }
    }
    assert!(writes > 0);
}

#[test]
fn torn_latest_checkpoint_falls_back_to_the_previous_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut all = Vec::new();
    {
        let idx = EnsembleIndex::create(cfg.clone()).unwrap();
        for _ in 0..3 {
            let b = batch(&mut rng, 2000, 8);
            idx.insert_vectors(b.clone()).unwrap();
            all.extend(b);
            idx.checkpoint().unwrap();
        }
        idx.insert_vectors(batch(&mut rng, 10, 8)).unwrap();
        all.extend(vec![vec![]; 10]);
    }
    let newest = list_checkpoints(&cfg.data_dir).unwrap()[0];
    let p = cfg.data_dir.join(format!("checkpoint-{newest:08}"));
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    let idx = EnsembleIndex::open(&cfg.data_dir).unwrap();
    assert_eq!(idx.recovery_report().unwrap().checkpoint, Some(newest - 1));
    assert_eq!(idx.committed_tid(), 4);
    for t in idx.trees() {
        assert_eq!(t.len(), all.len());
    }
    for (i, v) in all.iter().enumerate().take(6000).step_by(199) {
        assert!(idx
            .ensemble_search(v, 5)
            .unwrap()
            .ids()
            .contains(&(i as u64)));
    }
}

#[test]
fn missing_checkpoints_replay_the_full_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 8);
    cfg.checkpoint_every = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut all = Vec::new();
    {
        let idx = EnsembleIndex::create(cfg.clone()).unwrap();
        for _ in 0..6 {
            let b = batch(&mut rng, 3000, 8);
            idx.insert_vectors(b.clone()).unwrap();
            all.extend(b);
        }
    }
    for id in list_checkpoints(&cfg.data_dir).unwrap() {
        fs::remove_file(cfg.data_dir.join(format!("checkpoint-{id:08}"))).unwrap();
    }
    let idx = EnsembleIndex::open(&cfg.data_dir).unwrap();
    assert_eq!(idx.recovery_report().unwrap().checkpoint, None);
    assert_eq!(idx.committed_tid(), 6);
    let ids: HashSet<u64> = idx.trees()[0]
        .group_contents()
        .unwrap()
        .into_iter()
        .flat_map(|g| g.1)
        .collect();
    assert_eq!(ids.len(), all.len());
    for (i, v) in all.iter().enumerate().step_by(101) {
        assert!(idx
            .ensemble_search(v, 5)
            .unwrap()
            .ids()
            .contains(&(i as u64)));
    }
}

#[test]
fn no_log_after_checkpoint_reopens_to_the_same_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let queries = batch(&mut rng, 50, 8);
    let before: Vec<Vec<u64>> = {
        let idx = EnsembleIndex::create(cfg.clone()).unwrap();
        idx.insert_vectors(batch(&mut rng, 20_000, 8)).unwrap();
        let r = queries
            .iter()
            .map(|q| idx.ensemble_search(q, 10).unwrap().ids())
            .collect();
        idx.close().unwrap();
        r
    };
    let idx = EnsembleIndex::open(&cfg.data_dir).unwrap();
    let rep = idx.recovery_report().unwrap();
    assert_eq!(
        (
            rep.inserts_redone,
            rep.splits_replayed,
            rep.uncommitted_removed
        ),
        (0, 0, 0)
    );
    let after: Vec<Vec<u64>> = queries
        .iter()
        .map(|q| idx.ensemble_search(q, 10).unwrap().ids())
        .collect();
    assert_eq!(before, after);
}
