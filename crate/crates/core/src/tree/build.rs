//! Recursive construction of subtrees and leaf-groups.

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    cardinality_split, derive_seed, equal_distance_unchecked, make_line, PartitionSpec,
    ProjectionLine, Vector,
};
use crate::storage::leaf::{
    final_line_seed, id_epoch, leaf_line_seed, line_ref, node_line_seed, GroupNode, Leaf,
    LeafEntry, LeafGroup, LEAF_CAPACITY, MAX_LEAVES_PER_NODE, MAX_NODES,
};
use crate::tree::{Shape, TreeParams};

const DEGENERATE_RETRY_TAG: u64 = 0xDE6E_0000;
const DEGENERATE_RETRIES: u64 = 8;

pub(crate) fn projections(line: &ProjectionLine, items: &[&Vector]) -> Vec<f64> {
    items
        .iter()
        .map(|v| line.project_unchecked(&v.components))
        .collect()
}

/// Builds subtrees, handing out group ids from `next_gid`.
pub(crate) struct Builder<'a> {
    pub dim: usize,
    pub params: &'a TreeParams,
    pub next_gid: u64,
    pub groups: Vec<LeafGroup>,
}

impl<'a> Builder<'a> {
    pub fn new(dim: usize, params: &'a TreeParams, next_gid: u64) -> Self {
        Self {
            dim,
            params,
            next_gid,
            groups: Vec::new(),
        }
    }

    fn take_gid(&mut self) -> u64 {
        let g = self.next_gid;
        self.next_gid += 1;
        g
    }

    /// Builds a subtree over `items`, which must be sorted by id.
    pub fn build_node(&mut self, items: Vec<&Vector>, seed: u64) -> Result<Shape> {
        if items.len() <= self.params.group_target() {
            let gid = self.take_gid();
            let group = self.make_group(gid, 0, seed, &items)?;
            self.groups.push(group);
            return Ok(Shape::Group(gid));
        }
        let mut attempt = 0;
        let mut fallback = None;
        let (line_seed, spec, assign) = loop {
            let line_seed = if attempt == 0 {
                seed
            } else {
                derive_seed(seed, DEGENERATE_RETRY_TAG + attempt)
            };
            let line = make_line(line_seed, self.dim)?;
            let values = projections(&line, &items);
            match self.upper_partition(&values) {
                Ok((spec, assign, true)) => break (line_seed, spec, assign),
                // Children that cannot meet the fill range: try another
                // line, keeping the first result in case none does better.
                Ok((spec, assign, false)) => {
                    fallback.get_or_insert((line_seed, spec, assign));
                    if attempt == DEGENERATE_RETRIES {
                        break fallback.take().expect("set above");
                    }
                    attempt += 1;
                }
                Err(Error::DegenerateRange) if attempt < DEGENERATE_RETRIES => attempt += 1,
                Err(Error::DegenerateRange) => match fallback.take() {
                    Some(f) => break f,
                    None => {
                        return Err(invalid(format!(
                            "{} identical vectors cannot be partitioned",
                            items.len()
                        )))
                    }
                },
                Err(e) => return Err(e),
            }
        };
        let children = self.build_children(items, &spec, &assign, line_seed)?;
        Ok(Shape::Inner {
            seed: line_seed,
            spec,
            children,
        })
    }

    /// Builds one child per partition of `spec`; `assign[i]` is the partition of `items[i]`.
    pub fn build_children(
        &mut self,
        items: Vec<&Vector>,
        spec: &PartitionSpec,
        assign: &[usize],
        line_seed: u64,
    ) -> Result<Vec<Shape>> {
        let mut parts: Vec<Vec<&Vector>> = vec![Vec::new(); spec.fanout()];
        for (v, &p) in items.into_iter().zip(assign) {
            parts[p].push(v);
        }
        parts
            .into_iter()
            .enumerate()
            .map(|(i, part)| self.build_node(part, derive_seed(line_seed, i as u64 + 1)))
            .collect()
    }

    /// Equal-distance partitioning with center routing. Partitions whose
    /// size cannot be laid out within the fill range are merged into a
    /// neighbor; if that leaves too few partitions, equal-cardinality is used.
    /// The flag is false when some child still has an unusable size.
    fn upper_partition(&self, values: &[f64]) -> Result<(PartitionSpec, Vec<usize>, bool)> {
        let p = self.params;
        let spec = equal_distance_unchecked(values, p.fanout_max)?;
        if let Some((spec, assign)) = self.merge_misfits(values, spec, p.fanout_min)? {
            return Ok((spec, assign, true));
        }
        let preferred = values
            .len()
            .div_ceil(p.group_target())
            .clamp(p.fanout_min, p.fanout_max);
        let others = (p.fanout_min..=p.fanout_max).filter(|&f| f != preferred);
        let mut first = None;
        for fanout in std::iter::once(preferred).chain(others) {
            let spec = cardinality_split(values, fanout);
            if spec.fanout() < 2 {
                return Err(Error::DegenerateRange);
            }
            // Center routing does not follow the cardinality cuts exactly,
            // so children can still come out too small.
            if let Some((spec, assign)) = self.merge_misfits(values, spec.clone(), 2)? {
                return Ok((spec, assign, true));
            }
            first.get_or_insert(spec);
        }
        let spec = first.expect("at least one fanout tried");
        let assign = values.iter().map(|&v| spec.locate(v)).collect();
        Ok((spec, assign, false))
    }

    /// Merges partitions of unusable size into their smaller neighbor until
    /// every child fits, or `None` once fewer than `min_fanout` remain.
    fn merge_misfits(
        &self,
        values: &[f64],
        mut spec: PartitionSpec,
        min_fanout: usize,
    ) -> Result<Option<(PartitionSpec, Vec<usize>)>> {
        let p = self.params;
        while spec.fanout() >= min_fanout {
            let assign: Vec<usize> = values.iter().map(|&v| spec.locate(v)).collect();
            let mut counts = vec![0usize; spec.fanout()];
            for &a in &assign {
                counts[a] += 1;
            }
            let Some(bad) = counts.iter().position(|&c| !p.child_size_ok(c)) else {
                return Ok(Some((spec, assign)));
            };
            if counts.len() < 2 {
                break;
            }
            let last = counts.len() - 1;
            let neighbor = if bad == 0 {
                1
            } else if bad == last {
                last - 1
            } else if counts[bad + 1] < counts[bad - 1] {
                bad + 1
            } else {
                bad - 1
            };
            let mut boundaries = spec.boundaries().to_vec();
            boundaries.remove(bad.min(neighbor));
            spec = PartitionSpec::from_parts(boundaries, spec.strategy(), spec.min(), spec.max())?;
        }
        Ok(None)
    }

    /// Lays out `items` (sorted by id) as one leaf-group.
    pub fn make_group(
        &self,
        gid: u64,
        generation: u32,
        line_seed: u64,
        items: &[&Vector],
    ) -> Result<LeafGroup> {
        let dim = self.dim;
        if items.is_empty() {
            let mut g = LeafGroup::empty(gid, line_seed, dim)?;
            g.generation = generation;
            return Ok(g);
        }
        let epoch = id_epoch(items[0].id);
        let (nodes_wanted, _) = self.params.choose_layout(items.len());
        let node_line = make_line(node_line_seed(line_seed), dim)?;
        let p0 = projections(&node_line, items);
        let spec = cardinality_split(&p0, nodes_wanted);
        let mut buckets: Vec<Vec<&Vector>> = vec![Vec::new(); spec.fanout()];
        for (v, p) in items.iter().zip(&p0) {
            buckets[spec.interval_of(*p)].push(v);
        }
        debug_assert!(spec.fanout() <= MAX_NODES);
        let mut nodes = Vec::with_capacity(buckets.len());
        for (ni, bucket) in buckets.iter().enumerate() {
            let leaf_line = make_line(leaf_line_seed(line_seed, ni), dim)?;
            let p1 = projections(&leaf_line, bucket);
            let node_spec = cardinality_split(&p1, self.params.leaves_for(bucket.len()));
            debug_assert!(node_spec.fanout() <= MAX_LEAVES_PER_NODE);
            let mut leaf_items: Vec<Vec<&Vector>> = vec![Vec::new(); node_spec.fanout()];
            for (v, p) in bucket.iter().zip(&p1) {
                leaf_items[node_spec.interval_of(*p)].push(v);
            }
            let mut leaves = Vec::with_capacity(leaf_items.len());
            for (li, members) in leaf_items.iter().enumerate() {
                if members.len() > LEAF_CAPACITY {
                    return Err(invalid(format!(
                        "{} vectors share one leaf projection range; leaf capacity is {LEAF_CAPACITY}",
                        members.len()
                    )));
                }
                let r = line_ref(ni, li);
                let final_line = make_line(final_line_seed(line_seed, r), dim)?;
                leaves.push(fill_leaf(r, &final_line, members));
            }
            nodes.push(GroupNode {
                spec: node_spec,
                leaves,
            });
        }
        LeafGroup::new(gid, epoch, generation, line_seed, spec, nodes, dim)
    }
}

fn fill_leaf(line_ref: u32, line: &ProjectionLine, members: &[&Vector]) -> Leaf {
    let p2 = projections(line, members);
    let mut leaf = Leaf::empty(line_ref);
    if !p2.is_empty() {
        let (lo, hi) = p2
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        leaf.lo = lo as f32;
        leaf.hi = hi as f32;
    }
    let mut entries: Vec<LeafEntry> = members
        .iter()
        .zip(&p2)
        .map(|(v, &p)| LeafEntry {
            id: v.id,
            pos: leaf.quantize(p),
        })
        .collect();
    entries.sort_by_key(|e| e.pos);
    leaf.entries = entries;
    leaf
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                Vector::new(i as u64, c).unwrap()
            })
            .collect()
    }

    #[test]
    fn layout_keeps_leaves_in_fill_range() {
        let p = TreeParams::default();
        for n in 582..=p.group_target() {
            let (a, b) = p.choose_layout(n);
            let k = a * b;
            assert!(n / k >= 291 && n.div_ceil(k) <= 494, "n={n} a={a} b={b}");
        }
    }

    #[test]
    fn group_leaves_hold_every_item_once() {
        let p = TreeParams::default();
        let vs = random_vectors(5000, 16, 1);
        let refs: Vec<&Vector> = vs.iter().collect();
        let b = Builder::new(16, &p, 0);
        let g = b.make_group(0, 0, 99, &refs).unwrap();
        let mut ids = g.ids();
        ids.sort_unstable();
        assert_eq!(ids, (0..5000).collect::<Vec<_>>());
        for leaf in g.leaves() {
            assert!((291..=494).contains(&leaf.len()), "leaf of {}", leaf.len());
            assert!(leaf.entries.windows(2).all(|w| w[0].pos <= w[1].pos));
        }
        // Every item routes to the leaf that holds it.
        for v in &vs {
            let (n, l) = g.route(&v.components);
            assert!(g.nodes[n].leaves[l].entries.iter().any(|e| e.id == v.id));
        }
    }

    #[test]
    fn skewed_data_keeps_leaves_in_fill_range() {
        let p = TreeParams::default();
        let (lo, hi) = (p.leaf_min(), p.leaf_max());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [14_700, 22_854, 40_000] {
            let vs: Vec<Vector> = (0..n)
                .map(|i| {
                    let c = (0..8)
                        .map(|_| {
                            let x: f32 = StandardNormal.sample(&mut rng);
                            x.exp()
                        })
                        .collect();
                    Vector::new(i as u64, c).unwrap()
                })
                .collect();
            let mut b = Builder::new(8, &p, n as u64);
            b.build_node(vs.iter().collect(), 3).unwrap();
            let sizes: Vec<usize> = b
                .groups
                .iter()
                .flat_map(|g| g.leaves())
                .map(|l| l.len())
                .collect();
            assert_eq!(sizes.iter().sum::<usize>(), n);
            assert!(
                sizes.iter().all(|&s| (lo..=hi).contains(&s)),
                "n={n}: {sizes:?}"
            );
        }
    }

    #[test]
    fn heavy_tails_still_build_within_capacity() {
        let p = TreeParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vs: Vec<Vector> = (0..30_000)
            .map(|i| {
                let c = (0..4)
                    .map(|_| {
                        let x: f32 = StandardNormal.sample(&mut rng);
                        x.exp().powi(3)
                    })
                    .collect();
                Vector::new(i, c).unwrap()
            })
            .collect();
        let mut b = Builder::new(4, &p, 0);
        b.build_node(vs.iter().collect(), 3).unwrap();
        let total: usize = b
            .groups
            .iter()
            .flat_map(|g| g.leaves())
            .map(|l| l.len())
            .sum();
        assert_eq!(total, 30_000);
        assert!(b
            .groups
            .iter()
            .flat_map(|g| g.leaves())
            .all(|l| l.len() <= LEAF_CAPACITY));
    }

    #[test]
    fn upper_levels_respect_fanout_range() {
        let p = TreeParams::default();
        let vs = random_vectors(60_000, 16, 2);
        let refs: Vec<&Vector> = vs.iter().collect();
        let mut b = Builder::new(16, &p, 0);
        let shape = b.build_node(refs, 5).unwrap();
        fn walk(s: &Shape) {
            if let Shape::Inner { spec, children, .. } = s {
                assert!((4..=8).contains(&spec.fanout()));
                assert_eq!(children.len(), spec.fanout());
                children.iter().for_each(walk);
            }
        }
        walk(&shape);
        let total: usize = b.groups.iter().map(|g| g.len()).sum();
        assert_eq!(total, 60_000);
    }
}
