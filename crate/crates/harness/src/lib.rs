//! Evaluation and verification tooling for the nvtree index.

pub mod crash;
pub mod eval;
pub mod oracle;
pub mod vecfile;
pub mod workload;
