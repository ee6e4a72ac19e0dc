use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use crate::txn::checkpoint::MediaEntry;

/// Media id to vector id range, plus the deletion list.
#[derive(Debug, Default, Clone)]
pub struct Registry {
    ranges: BTreeMap<u64, Range<u64>>,
    by_start: BTreeMap<u64, (u64, u64)>,
    deleting: BTreeSet<u64>,
}

impl Registry {
    pub fn from_entries(entries: &[MediaEntry], deleting: &[u64]) -> Self {
        let mut r = Self::default();
        for e in entries {
            r.insert(e.media, e.start..e.end);
        }
        r.deleting = deleting
            .iter()
            .copied()
            .filter(|m| r.ranges.contains_key(m))
            .collect();
        r
    }

    pub fn insert(&mut self, media: u64, range: Range<u64>) {
        if !range.is_empty() {
            self.by_start.insert(range.start, (range.end, media));
        }
        self.ranges.insert(media, range);
    }

    pub fn remove(&mut self, media: u64) {
        if let Some(r) = self.ranges.remove(&media) {
            if !r.is_empty() {
                self.by_start.remove(&r.start);
            }
        }
        self.deleting.remove(&media);
    }

    pub fn contains(&self, media: u64) -> bool {
        self.ranges.contains_key(&media)
    }

    pub fn range(&self, media: u64) -> Option<Range<u64>> {
        self.ranges.get(&media).cloned()
    }

    pub fn media_of(&self, id: u64) -> Option<u64> {
        let (_, &(end, media)) = self.by_start.range(..=id).next_back()?;
        (id < end).then_some(media)
    }

    pub fn mark_deleting(&mut self, media: u64) {
        self.deleting.insert(media);
    }

    pub fn is_deleting(&self, media: u64) -> bool {
        self.deleting.contains(&media)
    }

    pub fn deleting(&self) -> Vec<u64> {
        self.deleting.iter().copied().collect()
    }

    /// Id ranges of every media on the deletion list.
    pub fn deleted_ranges(&self) -> Vec<Range<u64>> {
        self.deleting
            .iter()
            .filter_map(|m| self.ranges.get(m).cloned())
            .collect()
    }

    pub fn entries(&self) -> Vec<MediaEntry> {
        self.ranges
            .iter()
            .map(|(&media, r)| MediaEntry {
                media,
                start: r.start,
                end: r.end,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_by_vector_id() {
        let mut r = Registry::default();
        r.insert(7, 10..20);
        r.insert(3, 20..25);
        r.insert(9, 30..30);
        assert_eq!(r.media_of(9), None);
        assert_eq!(r.media_of(10), Some(7));
        assert_eq!(r.media_of(19), Some(7));
        assert_eq!(r.media_of(24), Some(3));
        assert_eq!(r.media_of(25), None);
        r.mark_deleting(7);
        assert_eq!(r.deleted_ranges(), vec![10..20]);
        r.remove(7);
        assert_eq!(r.media_of(10), None);
        assert!(r.deleting().is_empty());
    }
}
