use std::ops::Range;
use std::sync::Arc;

use crate::txn::log::Tid;

/// The committed horizon a query reads as of its start.
///
/// Vector ids are handed out in admission order, so everything below
/// `id_limit` was inserted by a committed transaction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Snapshot {
    pub horizon: Tid,
    pub id_limit: u64,
    /// Id ranges of media on the deletion list when the snapshot was taken.
    pub deleted: Arc<Vec<Range<u64>>>,
}

impl Snapshot {
    /// Sees every id; for trees used outside an ensemble.
    pub fn unbounded() -> Self {
        Self {
            horizon: Tid::MAX,
            id_limit: u64::MAX,
            deleted: Arc::new(Vec::new()),
        }
    }

    pub fn visible(&self, id: u64) -> bool {
        id < self.id_limit && !self.is_deleted(id)
    }

    pub fn is_deleted(&self, id: u64) -> bool {
        self.deleted.iter().any(|r| r.contains(&id))
    }
}
