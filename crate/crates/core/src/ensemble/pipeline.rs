//! Per-tree insert pipelines and the cross-tree commit point.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::mpsc::Receiver;
use std::sync::Arc;

use parking_lot::{Condvar, Mutex, RwLock};

use crate::ensemble::registry::Registry;
use crate::error::{Error, Result};
use crate::fault;
use crate::geometry::Vector;
use crate::tree::NvTree;
use crate::txn::log::{LogRecord, LogWriter, MediaOp, Tid};
use crate::txn::Snapshot;

#[derive(Debug, Clone)]
pub(crate) enum JobKind {
    Insert(Arc<Vec<Vector>>),
    Delete(Arc<Vec<u64>>),
}

#[derive(Debug)]
pub(crate) enum Msg {
    Job(Tid, JobKind),
    Stop,
}

#[derive(Debug)]
pub(crate) struct InFlight {
    pub done: usize,
    pub id_end: u64,
    pub media: MediaOp,
    pub inserted: Option<Range<u64>>,
}

#[derive(Debug, Default)]
pub(crate) struct Tracker {
    pub in_flight: BTreeMap<Tid, InFlight>,
    pub committed: Tid,
    pub failure: Option<String>,
    /// TIDs in the order their commit records were written.
    pub commit_order: Vec<Tid>,
}

/// What readers see: the committed horizon and the media registry.
#[derive(Debug)]
pub(crate) struct View {
    pub snapshot: Snapshot,
    pub registry: Registry,
}

impl View {
    pub fn refresh_deleted(&mut self) {
        self.snapshot.deleted = Arc::new(self.registry.deleted_ranges());
    }
}

pub(crate) struct Shared {
    pub trees: Vec<Arc<NvTree>>,
    pub tracker: Mutex<Tracker>,
    pub committed_cv: Condvar,
    pub global_log: Mutex<LogWriter>,
    pub view: RwLock<View>,
}

impl Shared {
    pub fn check_failed(&self) -> Result<()> {
        match &self.tracker.lock().failure {
            Some(msg) => Err(Error::Integrity(format!(
                "index stopped after a pipeline failure: {msg}"
            ))),
            None => Ok(()),
        }
    }

    pub fn fail(&self, err: Error) {
        tracing::error!(error = %err, "pipeline failure; refusing further writes");
        let mut tr = self.tracker.lock();
        tr.failure.get_or_insert_with(|| err.to_string());
        self.committed_cv.notify_all();
    }

    pub fn wait_for(&self, tid: Tid) -> Result<()> {
        let mut tr = self.tracker.lock();
        while tr.committed < tid {
            if let Some(msg) = &tr.failure {
                return Err(Error::Integrity(format!(
                    "transaction {tid} cannot commit: {msg}"
                )));
            }
            self.committed_cv.wait(&mut tr);
        }
        Ok(())
    }

    /// A pipeline finished `tid`. The last tree to finish commits every
    /// transaction at the front of the queue whose trees are all done.
    fn done(&self, tid: Tid) {
        let trees = self.trees.len();
        let mut tr = self.tracker.lock();
        if let Some(f) = tr.in_flight.get_mut(&tid) {
            f.done += 1;
        }
        while let Some((&front, f)) = tr.in_flight.first_key_value() {
            if f.done < trees || tr.failure.is_some() {
                break;
            }
            let f = tr.in_flight.remove(&front).expect("front exists");
            if let Err(e) = self.commit(front, f) {
                tr.failure.get_or_insert_with(|| e.to_string());
                break;
            }
            tr.committed = front;
            tr.commit_order.push(front);
        }
        self.committed_cv.notify_all();
    }

    fn commit(&self, tid: Tid, f: InFlight) -> Result<()> {
        {
            let mut g = self.global_log.lock();
            g.append(&LogRecord::Commit {
                tid,
                id_end: f.id_end,
                media: f.media.clone(),
            });
            fault::hit("commit-before-record-flush");
            g.flush()?;
            fault::hit("commit-after-record-flush");
        }
        if let Some(range) = f.inserted {
            for tree in &self.trees {
                fault::hit("feature-append-before");
                tree.release_features(range.clone())?;
                fault::hit("feature-append-after");
            }
        }
        let mut view = self.view.write();
        view.snapshot.horizon = tid;
        view.snapshot.id_limit = view.snapshot.id_limit.max(f.id_end);
        match f.media {
            MediaOp::None => {}
            MediaOp::Inserted { media, start, end } => view.registry.insert(media, start..end),
            MediaOp::Deleted { media } => {
                view.registry.remove(media);
                view.refresh_deleted();
            }
        }
        Ok(())
    }
}

pub(crate) fn run_pipeline(shared: Arc<Shared>, tree: usize, rx: Receiver<Msg>) {
    while let Ok(Msg::Job(tid, kind)) = rx.recv() {
        match process(&shared.trees[tree], tid, &kind) {
            Ok(()) => shared.done(tid),
            Err(e) => shared.fail(e),
        }
    }
}

fn process(tree: &NvTree, tid: Tid, kind: &JobKind) -> Result<()> {
    match kind {
        JobKind::Insert(vectors) => {
            for v in vectors.iter() {
                tree.log_insert(tid, v);
                fault::hit("tree-log-append");
                tree.insert_one(tid, v.clone())?;
                fault::hit("tree-apply-insert");
                tree.maintain()?;
            }
        }
        JobKind::Delete(ids) => {
            for &id in ids.iter() {
                tree.log_delete(tid, id);
                tree.delete_one(id)?;
                fault::hit("tree-apply-delete");
                tree.maintain()?;
            }
        }
    }
    fault::hit("tree-log-flush-before");
    tree.flush_log()?;
    fault::hit("tree-log-flush-after");
    Ok(())
}
