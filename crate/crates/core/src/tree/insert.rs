//! Writer-side operations: insertion, deletion, leaf-group splits, feature
//! release at commit, and cache write-back.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::Ordering;
use std::sync::Arc;

use parking_lot::{ArcRwLockWriteGuard, RawRwLock};

use crate::error::{invalid, Error, Result};
use crate::fault;
use crate::geometry::{cardinality_split, derive_seed, make_line, Vector};
use crate::tree::build::{projections, Builder};
use crate::tree::image::SplitImage;
use crate::tree::{materialize, Child, NvTree, Shape, TreeImage, SPLIT_TAG};
use crate::txn::log::{LogRecord, Tid};

const MAX_REBUILD_RETRIES: usize = 3;

impl NvTree {
    pub fn log_insert(&self, tid: Tid, v: &Vector) -> u64 {
        self.log.lock().append(&LogRecord::InsertVector {
            tid,
            vector: v.clone(),
        })
    }

    pub fn log_delete(&self, tid: Tid, id: u64) -> u64 {
        self.log.lock().append(&LogRecord::DeleteVector { tid, id })
    }

    /// Makes every tree-log record appended so far durable.
    pub fn flush_log(&self) -> Result<()> {
        self.log.lock().flush()
    }

    /// LSNs below this value are durable in the tree log.
    pub fn log_durable_lsn(&self) -> u64 {
        self.log.lock().durable_lsn()
    }

    pub fn log_bytes(&self) -> u64 {
        self.log.lock().bytes_written()
    }

    /// Slot of the group `q` descends to. Only the tree's single writer may
    /// rely on it staying a group slot after the path locks are gone.
    fn writer_slot(&self, q: &[f32]) -> crate::tree::Slot {
        let mut slot = Arc::clone(&self.root);
        loop {
            let next = match &*slot.read() {
                Child::Group(_) => None,
                Child::Inner(node) => {
                    let p = node.line.project_unchecked(q);
                    Some(Arc::clone(&node.children[node.spec.locate(p)]))
                }
            };
            match next {
                Some(n) => slot = n,
                None => return slot,
            }
        }
    }

    /// Inserts `v` as part of transaction `tid`. Its feature stays pending
    /// until [`NvTree::release_features`] runs at commit.
    pub fn insert_one(&self, tid: Tid, v: Vector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(invalid(format!(
                "vector {} has dimension {}, expected {}",
                v.id,
                v.dim(),
                self.dim
            )));
        }
        if self.meta.lock().locator.contains_key(&v.id) {
            return Err(Error::DuplicateId(v.id));
        }
        let id = v.id;
        let components = v.components.clone();
        self.features.lock().pending.insert(id, v);
        self.place(tid, id, &components)
    }

    fn place(&self, tid: Tid, id: u64, components: &[f32]) -> Result<()> {
        let mut rebuilt = 0;
        loop {
            let slot = self.writer_slot(components);
            let mut guard = slot.write_arc();
            let gid = match &*guard {
                Child::Group(g) => *g,
                Child::Inner(_) => continue,
            };
            self.load_group(gid, false)?;
            {
                let mut pool = self.pool.lock();
                let g = pool.get_mut(gid).expect("group loaded above");
                let (n, l) = g.route(components);
                let p = g.lines.final_lines[n][l].project_unchecked(components);
                let leaf = &mut g.nodes[n].leaves[l];
                if !leaf.is_full() {
                    leaf.insert_value(id, p);
                    drop(pool);
                    self.meta.lock().locator.insert(id, gid);
                    return Ok(());
                }
            }
            let new = self.split_leaf_group(&mut guard, gid, tid)?;
            if new == [gid] {
                rebuilt += 1;
                if rebuilt > MAX_REBUILD_RETRIES {
                    return Err(invalid(format!(
                        "vector {id} lands in a full leaf of group {gid} even after rebuilding"
                    )));
                }
            }
        }
    }

    /// Removes `id` from its leaf. Returns false if the id is not indexed.
    pub fn delete_one(&self, id: u64) -> Result<bool> {
        let (gid, slot) = {
            let meta = self.meta.lock();
            let Some(&gid) = meta.locator.get(&id) else {
                return Ok(false);
            };
            (gid, Arc::clone(&meta.slots[&gid]))
        };
        let _guard = slot.write_arc();
        self.load_group(gid, false)?;
        let removed = self
            .pool
            .lock()
            .get_mut(gid)
            .map(|g| g.remove(id))
            .unwrap_or(false);
        if !removed {
            return Err(Error::Integrity(format!(
                "locator maps {id} to group {gid} which lacks it"
            )));
        }
        self.meta.lock().locator.remove(&id);
        Ok(true)
    }

    /// Raw vectors for the entries of `gid`, in id order, each flagged
    /// committed (from the store) or pending.
    fn gather(&self, gid: u64, ids: &[u64]) -> Result<Vec<(Vector, bool)>> {
        let f = self.features.lock();
        let stored: HashMap<u64, Vector> = f
            .store
            .fetch_group_features(gid)?
            .into_iter()
            .map(|v| (v.id, v))
            .collect();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            if let Some(v) = stored.get(id) {
                out.push((v.clone(), true));
            } else if let Some(v) = f.pending.get(id) {
                out.push((v.clone(), false));
            } else {
                return Err(Error::Integrity(format!(
                    "feature of vector {id} in group {gid} is missing"
                )));
            }
        }
        Ok(out)
    }

    fn split_seed(&self, gid: u64, generation: u32) -> u64 {
        derive_seed(
            derive_seed(derive_seed(self.seed, SPLIT_TAG), gid),
            generation as u64,
        )
    }

    /// Rebuilds or splits `gid`, whose slot `guard` holds exclusively.
    /// Returns the ids of the groups that replace it.
    pub(crate) fn split_leaf_group(
        &self,
        guard: &mut ArcRwLockWriteGuard<RawRwLock, Child>,
        gid: u64,
        tid: Tid,
    ) -> Result<Vec<u64>> {
        // Held throughout so a concurrent commit cannot append features to
        // the group being replaced.
        let mut meta = self.meta.lock();
        let old = self.load_group(gid, false)?;
        let mut ids = old.ids();
        ids.sort_unstable();
        let gathered = self.gather(gid, &ids)?;
        let refs: Vec<&Vector> = gathered.iter().map(|(v, _)| v).collect();
        let generation = old.generation + 1;
        let line_seed = self.split_seed(gid, generation);
        let mut builder = Builder::new(self.dim, &self.params, meta.next_gid);
        let image = if refs.len() <= self.params.rebuild_limit() {
            let group = builder.make_group(gid, generation, line_seed, &refs)?;
            SplitImage {
                generation,
                shape: Shape::Group(gid),
                groups: vec![group],
            }
        } else {
            let fanout = refs
                .len()
                .div_ceil(self.params.group_target())
                .clamp(self.params.fanout_min, self.params.fanout_max);
            let line = make_line(line_seed, self.dim)?;
            let values = projections(&line, &refs);
            let spec = cardinality_split(&values, fanout);
            if spec.fanout() < 2 {
                return Err(invalid(format!(
                    "group {gid} holds identical vectors that cannot be split"
                )));
            }
            let assign: Vec<usize> = values.iter().map(|&p| spec.locate(p)).collect();
            let children = builder.build_children(refs, &spec, &assign, line_seed)?;
            SplitImage {
                generation,
                shape: Shape::Inner {
                    seed: line_seed,
                    spec,
                    children,
                },
                groups: std::mem::take(&mut builder.groups),
            }
        };
        meta.next_gid = builder.next_gid;
        let new_ids: Vec<u64> = image.groups.iter().map(|g| g.id).collect();
        if !self.recovering.load(Ordering::Relaxed) {
            let payload = image.encode()?;
            let mut log = self.log.lock();
            log.append(&LogRecord::Split {
                tid,
                old_group: gid,
                new_groups: new_ids.clone(),
                payload,
            });
            fault::hit("split-after-log");
            // The feature store is rewritten below; its covering record goes first.
            log.flush()?;
        }
        let committed: HashMap<u64, Vector> = gathered
            .into_iter()
            .filter(|(_, c)| *c)
            .map(|(v, _)| (v.id, v))
            .collect();
        self.install(&mut meta, guard, gid, image, &committed)?;
        if new_ids == [gid] {
            self.stats.rebuilds.fetch_add(1, Ordering::Relaxed);
        } else {
            self.stats.splits.fetch_add(1, Ordering::Relaxed);
        }
        fault::hit("split-after-install");
        Ok(new_ids)
    }

    /// Replaces group `old` by the image's subtree. `features` holds the
    /// committed vectors to write for the new groups.
    fn install(
        &self,
        meta: &mut crate::tree::Meta,
        slot: &mut Child,
        old: u64,
        image: SplitImage,
        features: &HashMap<u64, Vector>,
    ) -> Result<()> {
        let mut rewritten: Vec<(u64, Vec<Vector>)> = Vec::with_capacity(image.groups.len());
        for g in &image.groups {
            let mut ids = g.ids();
            ids.sort_unstable();
            let vs = ids
                .iter()
                .filter_map(|i| features.get(i).cloned())
                .collect();
            rewritten.push((g.id, vs));
        }
        {
            let mut pool = self.pool.lock();
            pool.remove(old);
            if !matches!(image.shape, Shape::Group(g) if g == old) {
                self.file.write().remove_group(old);
            }
            for g in image.groups {
                for id in g.ids() {
                    meta.locator.insert(id, g.id);
                }
                meta.next_gid = meta.next_gid.max(g.id + 1);
                pool.insert_dirty(g);
            }
        }
        if !matches!(image.shape, Shape::Group(g) if g == old) {
            let mut slots = HashMap::new();
            let child = materialize(&image.shape, self.dim, &mut slots);
            meta.slots.remove(&old);
            meta.slots.extend(slots);
            *slot = child;
        }
        self.features.lock().store.replace_group(old, &rewritten)?;
        Ok(())
    }

    /// Moves the pending features of `ids` into the store under their
    /// current groups. Called once their transaction commits.
    pub fn release_features(&self, ids: impl IntoIterator<Item = u64>) -> Result<()> {
        let meta = self.meta.lock();
        let mut f = self.features.lock();
        let mut by_group: BTreeMap<u64, Vec<Vector>> = BTreeMap::new();
        for id in ids {
            if let Some(v) = f.pending.remove(&id) {
                if let Some(&gid) = meta.locator.get(&id) {
                    by_group.entry(gid).or_default().push(v);
                }
            }
        }
        for (gid, vs) in by_group {
            f.store.append_features(gid, &vs)?;
        }
        Ok(())
    }

    pub fn pending_features(&self) -> usize {
        self.features.lock().pending.len()
    }

    /// Writes back and evicts cached groups once the cache is over capacity.
    /// Dirty groups are written only after the tree log is durable.
    pub fn maintain(&self) -> Result<()> {
        let mut pool = self.pool.lock();
        if !pool.over_capacity() {
            return Ok(());
        }
        let target = pool.capacity() - pool.capacity() / 10;
        let victims = pool.victims(target, true);
        if victims.iter().any(|(_, dirty)| *dirty) {
            self.log.lock().flush()?;
        }
        let mut file = self.file.write();
        for (gid, dirty) in victims {
            if dirty {
                let g = pool.get(gid).expect("victim is cached");
                fault::hit("leaf-flush-before-write");
                file.write_leaf_group(&g)?;
                fault::hit("leaf-flush-after-write");
                self.stats.leaf_writes.fetch_add(1, Ordering::Relaxed);
            }
            pool.remove(gid);
            self.stats.evictions.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    /// Starts a new log segment and makes all tree state durable. The
    /// caller guarantees no transaction work is in flight.
    pub fn checkpoint_prepare(&self) -> Result<TreeImage> {
        let log_start = self.log.lock().rotate()?;
        let meta = self.meta.lock();
        let mut pool = self.pool.lock();
        let mut file = self.file.write();
        for g in pool.dirty() {
            file.write_leaf_group(&g)?;
            pool.mark_clean(g.id);
            self.stats.leaf_writes.fetch_add(1, Ordering::Relaxed);
        }
        let leaves = file.flush()?;
        let features = self.features.lock().store.flush()?;
        drop(file);
        drop(pool);
        Ok(TreeImage {
            next_group_id: meta.next_gid,
            shape: self.shape(),
            leaves,
            features,
            log_start,
        })
    }

    /// The image is durable: old extents become reusable and log segments
    /// older than `keep_from` are dropped.
    pub fn checkpoint_published(&self, image: &TreeImage, keep_from: u64) -> Result<()> {
        self.file.write().published(&image.leaves);
        self.log.lock().truncate_before(keep_from)
    }

    pub(crate) fn set_recovering(&self, on: bool) {
        self.recovering.store(on, Ordering::Relaxed);
    }

    /// Recovery: installs a committed split image in place of `old`.
    pub(crate) fn replay_split(
        &self,
        old: u64,
        image: SplitImage,
        log_vectors: &HashMap<u64, Vector>,
    ) -> Result<()> {
        let mut meta = self.meta.lock();
        let Some(slot) = meta.slots.get(&old).cloned() else {
            return Err(Error::Integrity(format!(
                "split record names unknown group {old}"
            )));
        };
        let mut guard = slot.write_arc();
        let mut features: HashMap<u64, Vector> = self
            .features
            .lock()
            .store
            .fetch_group_features(old)?
            .into_iter()
            .map(|v| (v.id, v))
            .collect();
        for g in &image.groups {
            for id in g.ids() {
                if let Some(v) = log_vectors.get(&id) {
                    features.entry(id).or_insert_with(|| v.clone());
                }
            }
        }
        self.install(&mut meta, &mut guard, old, image, &features)
    }

    /// Recovery: drops entries with ids at or above `id_limit`.
    pub(crate) fn remove_uncommitted(&self, id_limit: u64) -> Result<usize> {
        let doomed: Vec<(u64, u64)> = self
            .meta
            .lock()
            .locator
            .iter()
            .filter(|(id, _)| **id >= id_limit)
            .map(|(id, g)| (*id, *g))
            .collect();
        for (id, _) in &doomed {
            self.delete_one(*id)?;
        }
        Ok(doomed.len())
    }

    /// Recovery: re-inserts a committed vector unless a replayed split
    /// already placed it; the feature goes straight to the store.
    pub(crate) fn redo_insert(&self, v: &Vector) -> Result<bool> {
        if self.contains(v.id) {
            return Ok(false);
        }
        self.insert_one(0, v.clone())?;
        self.release_features([v.id])?;
        Ok(true)
    }
}
