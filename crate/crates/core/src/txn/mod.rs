//! Transactions: write-ahead logs, snapshots, checkpoints and recovery.

pub mod checkpoint;
pub mod log;
pub mod recovery;
pub mod snapshot;

pub use log::{LogRecord, MediaOp, Tid};
pub use snapshot::Snapshot;
