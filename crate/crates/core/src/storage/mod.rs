pub mod features;
pub mod file;
pub mod leaf;

pub use features::{FeatureStore, FeatureWatermark};
pub use file::{Extent, LeafFile, LeafWatermark, PageAllocator};
pub use leaf::{LeafEntry, LeafGroup, LEAF_CAPACITY};
