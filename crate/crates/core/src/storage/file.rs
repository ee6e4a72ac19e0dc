//! The leaf-group file: a header block followed by variable-length group
//! extents allocated in 4 KB blocks.
//!
//! Groups are written copy-on-write. A new version of a group always lands in
//! a fresh extent, and the group directory only becomes durable through a
//! [`LeafWatermark`] returned by [`LeafFile::flush`]. Extents referenced by
//! the last two published watermarks are never reused, so reopening with
//! either watermark finds intact groups.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{corrupt, Error, Result};
use crate::storage::leaf::{LeafGroup, PAGE_SIZE};

const FILE_MAGIC: &[u8; 8] = b"NVLEAF01";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Extent {
    /// First block; block 0 is the file header.
    pub block: u64,
    /// Length of the encoded group in bytes.
    pub len: u32,
}

impl Extent {
    pub fn blocks(&self) -> u64 {
        blocks_for(self.len as usize)
    }

    pub fn offset(&self) -> u64 {
        self.block * PAGE_SIZE as u64
    }
}

fn blocks_for(len: usize) -> u64 {
    len.div_ceil(PAGE_SIZE) as u64
}

/// Durable view of the group directory at a flush barrier.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeafWatermark {
    pub end_block: u64,
    pub directory: Vec<(u64, Extent)>,
}

impl LeafWatermark {
    fn blocks(&self) -> HashSet<u64> {
        self.directory.iter().map(|(_, e)| e.block).collect()
    }
}

/// First-fit free list over blocks with an end-of-file watermark.
#[derive(Debug, Default)]
pub struct PageAllocator {
    free: BTreeMap<u64, u64>,
    end: u64,
    limit: Option<u64>,
}

impl PageAllocator {
    pub fn new(end: u64) -> Self {
        Self {
            free: BTreeMap::new(),
            end,
            limit: None,
        }
    }

    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn allocate(&mut self, blocks: u64) -> Result<u64> {
        let found = self
            .free
            .iter()
            .find(|(_, &n)| n >= blocks)
            .map(|(&s, &n)| (s, n));
        if let Some((start, n)) = found {
            self.free.remove(&start);
            if n > blocks {
                self.free.insert(start + blocks, n - blocks);
            }
            return Ok(start);
        }
        if let Some(limit) = self.limit {
            if self.end + blocks > limit {
                return Err(Error::OutOfSpace(format!(
                    "leaf file limited to {limit} blocks, need {} more",
                    blocks
                )));
            }
        }
        let start = self.end;
        self.end += blocks;
        Ok(start)
    }

    pub fn release(&mut self, mut start: u64, mut blocks: u64) {
        if let Some((&prev, &n)) = self.free.range(..start).next_back() {
            if prev + n == start {
                self.free.remove(&prev);
                start = prev;
                blocks += n;
            }
        }
        if let Some(&n) = self.free.get(&(start + blocks)) {
            self.free.remove(&(start + blocks));
            blocks += n;
        }
        if start + blocks == self.end {
            self.end = start;
        } else {
            self.free.insert(start, blocks);
        }
    }

    pub fn free_blocks(&self) -> u64 {
        self.free.values().sum()
    }
}

#[derive(Debug)]
pub struct LeafFile {
    file: File,
    path: PathBuf,
    dim: usize,
    directory: HashMap<u64, Extent>,
    alloc: PageAllocator,
    protected: HashSet<u64>,
    last_published: HashSet<u64>,
    deferred: Vec<Extent>,
    reads: AtomicU64,
    writes: AtomicU64,
}

impl LeafFile {
    pub fn create(path: &Path, tree_id: u32, dim: usize) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(path)?;
        let mut header = vec![0u8; PAGE_SIZE];
        header[..8].copy_from_slice(FILE_MAGIC);
        header[8..12].copy_from_slice(&FILE_VERSION.to_le_bytes());
        header[12..16].copy_from_slice(&tree_id.to_le_bytes());
        header[16..20].copy_from_slice(&(dim as u32).to_le_bytes());
        header[20..24].copy_from_slice(&(PAGE_SIZE as u32).to_le_bytes());
        file.write_all_at(&header, 0)?;
        file.sync_all()?;
        Ok(Self::with_state(
            file,
            path,
            dim,
            HashMap::new(),
            PageAllocator::new(1),
        ))
    }

    /// Reopens the file as of `watermark`; anything written after it is dropped.
    pub fn open(path: &Path, dim: usize, watermark: &LeafWatermark) -> Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut header = [0u8; 24];
        file.read_exact_at(&mut header, 0)?;
        if &header[..8] != FILE_MAGIC {
            return Err(corrupt(format!(
                "{}: not a leaf-group file",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != FILE_VERSION {
            return Err(corrupt(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let stored_dim = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        if stored_dim != dim {
            return Err(corrupt(format!(
                "{}: dimension {stored_dim}, expected {dim}",
                path.display()
            )));
        }
        let end = watermark.end_block.max(1);
        file.set_len(end * PAGE_SIZE as u64)?;
        let directory: HashMap<u64, Extent> = watermark.directory.iter().copied().collect();
        let mut alloc = PageAllocator::new(end);
        let mut used: Vec<Extent> = directory.values().copied().collect();
        used.sort_by_key(|e| e.block);
        let mut cursor = 1;
        for e in &used {
            if e.block < cursor || e.block + e.blocks() > end {
                return Err(corrupt(
                    "overlapping or out-of-range extents in leaf watermark",
                ));
            }
            if e.block > cursor {
                alloc.free.insert(cursor, e.block - cursor);
            }
            cursor = e.block + e.blocks();
        }
        if cursor < end {
            alloc.free.insert(cursor, end - cursor);
        }
        let mut lf = Self::with_state(file, path, dim, directory, alloc);
        lf.last_published = watermark.blocks();
        lf.protected = lf.last_published.clone();
        Ok(lf)
    }

    fn with_state(
        file: File,
        path: &Path,
        dim: usize,
        directory: HashMap<u64, Extent>,
        alloc: PageAllocator,
    ) -> Self {
        Self {
            file,
            path: path.to_path_buf(),
            dim,
            directory,
            alloc,
            protected: HashSet::new(),
            last_published: HashSet::new(),
            deferred: Vec::new(),
            reads: AtomicU64::new(0),
            writes: AtomicU64::new(0),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Caps the file at `blocks` blocks (header included).
    pub fn set_block_limit(&mut self, blocks: Option<u64>) {
        self.alloc.limit = blocks;
    }

    pub fn contains(&self, group_id: u64) -> bool {
        self.directory.contains_key(&group_id)
    }

    pub fn extent(&self, group_id: u64) -> Option<Extent> {
        self.directory.get(&group_id).copied()
    }

    pub fn group_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.directory.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Fetches one group with a single contiguous read.
    pub fn read_leaf_group(&self, group_id: u64) -> Result<LeafGroup> {
        let extent = self
            .extent(group_id)
            .ok_or_else(|| Error::NotFound(format!("leaf-group {group_id}")))?;
        let mut buf = vec![0u8; extent.len as usize];
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.file.read_exact_at(&mut buf, extent.offset())?;
        let group = LeafGroup::decode(&buf, self.dim)?;
        if group.id != group_id {
            return Err(corrupt(format!(
                "extent for group {group_id} holds group {}",
                group.id
            )));
        }
        Ok(group)
    }

    /// Writes a new version of `group` to a fresh extent.
    pub fn write_leaf_group(&mut self, group: &LeafGroup) -> Result<Extent> {
        let bytes = group.encode()?;
        let blocks = blocks_for(bytes.len());
        let block = self.alloc.allocate(blocks)?;
        let extent = Extent {
            block,
            len: bytes.len() as u32,
        };
        self.file.write_all_at(&bytes, extent.offset())?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        if let Some(old) = self.directory.insert(group.id, extent) {
            self.release(old);
        }
        Ok(extent)
    }

    pub fn remove_group(&mut self, group_id: u64) {
        if let Some(old) = self.directory.remove(&group_id) {
            self.release(old);
        }
    }

    fn release(&mut self, extent: Extent) {
        if self.protected.contains(&extent.block) {
            self.deferred.push(extent);
        } else {
            self.alloc.release(extent.block, extent.blocks());
        }
    }

    /// Durability barrier: syncs data and returns the directory to publish.
    pub fn flush(&mut self) -> Result<LeafWatermark> {
        self.file.sync_data()?;
        let mut directory: Vec<(u64, Extent)> =
            self.directory.iter().map(|(k, v)| (*k, *v)).collect();
        directory.sort_unstable_by_key(|(id, _)| *id);
        let watermark = LeafWatermark {
            end_block: self.alloc.end(),
            directory,
        };
        Ok(watermark)
    }

    /// Records that `watermark` is now published; extents only the watermark
    /// before the previous one referenced become reusable.
    pub fn published(&mut self, watermark: &LeafWatermark) {
        let current = watermark.blocks();
        self.protected = current.union(&self.last_published).copied().collect();
        self.last_published = current;
        let deferred = std::mem::take(&mut self.deferred);
        for e in deferred {
            self.release(e);
        }
    }

    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn write_count(&self) -> u64 {
        self.writes.load(Ordering::Relaxed)
    }

    pub fn file_size(&self) -> u64 {
        self.alloc.end() * PAGE_SIZE as u64
    }

    pub fn free_blocks(&self) -> u64 {
        self.alloc.free_blocks()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PartitionSpec, PartitionStrategy};
    use crate::storage::leaf::{line_ref, GroupNode, Leaf, LeafEntry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn group(id: u64, entries: usize, salt: u64) -> LeafGroup {
        let node = GroupNode {
            spec: PartitionSpec::from_parts(
                vec![0.0],
                PartitionStrategy::EqualCardinality,
                -1.0,
                1.0,
            )
            .unwrap(),
            leaves: (0..2)
                .map(|l| {
                    let mut leaf = Leaf::empty(line_ref(0, l));
                    leaf.lo = -1.0;
                    leaf.hi = 1.0;
                    for k in 0..entries {
                        leaf.insert(LeafEntry {
                            id: id * 10_000 + (l * entries + k) as u64,
                            pos: ((k as u64 * 31 + salt) % 65536) as u16,
                        });
                    }
                    leaf
                })
                .collect(),
        };
        LeafGroup::new(
            id,
            0,
            salt as u32,
            id ^ 0xABCD,
            PartitionSpec::single(0.0, 0.0),
            vec![node],
            8,
        )
        .unwrap()
    }

    #[test]
    fn write_then_read_round_trips_with_one_read() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = LeafFile::create(&dir.path().join("t.nvl"), 0, 8).unwrap();
        let g = group(3, 40, 1);
        f.write_leaf_group(&g).unwrap();
        let before = f.read_count();
        let back = f.read_leaf_group(3).unwrap();
        assert_eq!(f.read_count() - before, 1);
        assert_eq!(back.encode().unwrap(), g.encode().unwrap());
        assert!(matches!(f.read_leaf_group(99), Err(Error::NotFound(_))));
    }

    #[test]
    fn reopen_sees_only_flushed_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nvl");
        let mut f = LeafFile::create(&path, 0, 8).unwrap();
        f.write_leaf_group(&group(1, 10, 1)).unwrap();
        let wm1 = f.flush().unwrap();
        f.published(&wm1);
        // New version written but never flushed: a crash here must expose the old one.
        f.write_leaf_group(&group(1, 12, 2)).unwrap();
        drop(f);
        let mut f = LeafFile::open(&path, 8, &wm1).unwrap();
        assert_eq!(f.read_leaf_group(1).unwrap().generation, 1);
        f.write_leaf_group(&group(1, 12, 2)).unwrap();
        f.write_leaf_group(&group(1, 14, 3)).unwrap();
        let wm2 = f.flush().unwrap();
        f.published(&wm2);
        drop(f);
        let f = LeafFile::open(&path, 8, &wm2).unwrap();
        assert_eq!(f.read_leaf_group(1).unwrap().generation, 3);
        // The previous watermark is still readable.
        let f = LeafFile::open(&path, 8, &wm1).unwrap();
        assert_eq!(f.read_leaf_group(1).unwrap().generation, 1);
    }

    #[test]
    fn byte_flip_in_flushed_group_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nvl");
        let mut f = LeafFile::create(&path, 0, 8).unwrap();
        let e = f.write_leaf_group(&group(5, 20, 0)).unwrap();
        let wm = f.flush().unwrap();
        drop(f);
        let raw = std::fs::read(&path).unwrap();
        for i in (0..e.len as usize).step_by(7) {
            let mut damaged = raw.clone();
            damaged[e.offset() as usize + i] ^= 1;
            std::fs::write(&path, &damaged).unwrap();
            let f = LeafFile::open(&path, 8, &wm).unwrap();
            assert!(
                matches!(f.read_leaf_group(5), Err(Error::Corruption(_))),
                "byte {i}"
            );
        }
    }

    #[test]
    fn protected_extents_are_not_reused() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = LeafFile::create(&dir.path().join("t.nvl"), 0, 8).unwrap();
        let a = f.write_leaf_group(&group(1, 10, 0)).unwrap();
        let wm = f.flush().unwrap();
        f.published(&wm);
        let b = f.write_leaf_group(&group(1, 10, 1)).unwrap();
        let c = f.write_leaf_group(&group(1, 10, 2)).unwrap();
        assert_ne!(b.block, a.block);
        assert_ne!(c.block, a.block);
        // `b` was never published, so its blocks are recycled at once.
        let d = f.write_leaf_group(&group(2, 10, 3)).unwrap();
        assert_eq!(d.block, b.block);
    }

    #[test]
    fn out_of_space_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = LeafFile::create(&dir.path().join("t.nvl"), 0, 8).unwrap();
        f.set_block_limit(Some(2));
        f.write_leaf_group(&group(1, 10, 0)).unwrap();
        assert!(matches!(
            f.write_leaf_group(&group(2, 10, 0)),
            Err(Error::OutOfSpace(_))
        ));
    }

    #[test]
    fn allocator_coalesces() {
        let mut a = PageAllocator::new(1);
        let x = a.allocate(2).unwrap();
        let y = a.allocate(3).unwrap();
        let z = a.allocate(1).unwrap();
        a.release(x, 2);
        a.release(y, 3);
        assert_eq!(a.allocate(5).unwrap(), x);
        a.release(z, 1);
        assert_eq!(a.end(), z);
    }

    #[test]
    fn concurrent_readers_round_trip_many_groups() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = LeafFile::create(&dir.path().join("t.nvl"), 0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checksums = HashMap::new();
        for id in 0..1000u64 {
            let g = group(id, rng.gen_range(0..30), rng.gen());
            checksums.insert(id, crc32fast::hash(&g.encode().unwrap()));
            f.write_leaf_group(&g).unwrap();
        }
        let f = Arc::new(f);
        let checksums = Arc::new(checksums);
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let f = Arc::clone(&f);
                let checksums = Arc::clone(&checksums);
                std::thread::spawn(move || {
                    for id in (t..1000u64).step_by(4).chain((0..1000).rev()) {
                        let g = f.read_leaf_group(id).unwrap();
                        assert_eq!(crc32fast::hash(&g.encode().unwrap()), checksums[&id]);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(f.read_count(), 4 * 1000 / 4 + 4 * 1000);
    }
}
