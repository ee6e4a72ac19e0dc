//! In-memory cache of leaf-groups with dirty tracking and LRU eviction.

use std::collections::HashMap;
use std::sync::Arc;

use crate::storage::leaf::LeafGroup;

#[derive(Debug)]
struct Entry {
    group: Arc<LeafGroup>,
    dirty: bool,
    tick: u64,
}

#[derive(Debug)]
pub(crate) struct BufferPool {
    entries: HashMap<u64, Entry>,
    capacity: usize,
    tick: u64,
}

impl BufferPool {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: HashMap::new(),
            capacity: capacity.max(1),
            tick: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn set_capacity(&mut self, capacity: usize) {
        self.capacity = capacity.max(1);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&mut self, gid: u64) -> Option<Arc<LeafGroup>> {
        self.tick += 1;
        let tick = self.tick;
        self.entries.get_mut(&gid).map(|e| {
            e.tick = tick;
            Arc::clone(&e.group)
        })
    }

    /// Mutable access for the writer; clones only if a reader still holds the group.
    pub fn get_mut(&mut self, gid: u64) -> Option<&mut LeafGroup> {
        self.tick += 1;
        let tick = self.tick;
        self.entries.get_mut(&gid).map(|e| {
            e.tick = tick;
            e.dirty = true;
            Arc::make_mut(&mut e.group)
        })
    }

    /// Caches a group read from disk unless a newer copy is already present.
    pub fn insert_clean(&mut self, group: Arc<LeafGroup>) {
        self.tick += 1;
        let tick = self.tick;
        self.entries.entry(group.id).or_insert(Entry {
            group,
            dirty: false,
            tick,
        });
    }

    pub fn insert_dirty(&mut self, group: LeafGroup) {
        self.tick += 1;
        self.entries.insert(
            group.id,
            Entry {
                group: Arc::new(group),
                dirty: true,
                tick: self.tick,
            },
        );
    }

    pub fn remove(&mut self, gid: u64) -> Option<Arc<LeafGroup>> {
        self.entries.remove(&gid).map(|e| e.group)
    }

    pub fn dirty(&self) -> Vec<Arc<LeafGroup>> {
        let mut out: Vec<Arc<LeafGroup>> = self
            .entries
            .values()
            .filter(|e| e.dirty)
            .map(|e| Arc::clone(&e.group))
            .collect();
        out.sort_by_key(|g| g.id);
        out
    }

    pub fn mark_clean(&mut self, gid: u64) {
        if let Some(e) = self.entries.get_mut(&gid) {
            e.dirty = false;
        }
    }

    /// Least recently used groups to drop so that the pool fits `target`.
    /// Dirty ones are included only if `include_dirty`.
    pub fn victims(&self, target: usize, include_dirty: bool) -> Vec<(u64, bool)> {
        if self.entries.len() <= target {
            return Vec::new();
        }
        let mut order: Vec<(u64, u64, bool)> = self
            .entries
            .iter()
            .filter(|(_, e)| include_dirty || !e.dirty)
            .map(|(gid, e)| (e.tick, *gid, e.dirty))
            .collect();
        order.sort_unstable();
        order
            .into_iter()
            .take(self.entries.len() - target)
            .map(|(_, gid, dirty)| (gid, dirty))
            .collect()
    }

    pub fn over_capacity(&self) -> bool {
        self.entries.len() > self.capacity
    }
}
