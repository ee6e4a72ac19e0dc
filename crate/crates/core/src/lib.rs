//! Disk-resident NV-tree ensemble for approximate nearest-neighbor search.

pub mod ensemble;
pub mod error;
pub mod fault;
pub mod geometry;
pub mod storage;
pub mod tree;
pub mod txn;

pub use ensemble::{AggregatedResult, EnsembleIndex, IndexConfig, MediaVote, OpenOptions};
pub use error::{Error, Result};
pub use geometry::{make_line, project, PartitionSpec, PartitionStrategy, ProjectionLine, Vector};
pub use tree::{Neighbor, NvTree, TreeParams};
pub use txn::{Snapshot, Tid};
