use crate::storage::leaf::{Leaf, LeafGroup};
use crate::txn::Snapshot;

/// Nodes scanned per group and leaves scanned per node.
pub const NODES_SCANNED: usize = 2;
pub const LEAVES_SCANNED: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    /// 1 is closest.
    pub rank: u32,
    /// Quantized distance on the final projection line.
    pub distance: f32,
}

/// Scans the two closest nodes and two closest leaves of each.
pub(crate) fn search_group(
    group: &LeafGroup,
    q: &[f32],
    k: usize,
    snapshot: &Snapshot,
) -> Vec<Neighbor> {
    // (distance, scan order, id): equal distances favor the leaf the query
    // routes to, which is scanned first.
    let mut cand: Vec<(f64, u64)> = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut scanned = 0;
    let p0 = group.lines.node_line.project_unchecked(q);
    for n in group.spec.nearest_intervals(p0, NODES_SCANNED) {
        let node = &group.nodes[n];
        let p1 = group.lines.leaf_lines[n].project_unchecked(q);
        for l in node.spec.nearest_intervals(p1, LEAVES_SCANNED) {
            let leaf = &node.leaves[l];
            let p2 = group.lines.final_lines[n][l].project_unchecked(q);
            scan_leaf(leaf, leaf.quantize(p2), k, snapshot, &mut cand);
            order.resize(cand.len(), scanned);
            scanned += 1;
        }
    }
    let mut ranked: Vec<(f64, usize, u64)> = cand
        .into_iter()
        .zip(order)
        .map(|((d, id), o)| (d, o, id))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    ranked.truncate(k);
    ranked
        .into_iter()
        .enumerate()
        .map(|(i, (d, _, id))| Neighbor {
            id,
            rank: i as u32 + 1,
            distance: d as f32,
        })
        .collect()
}

/// Collects up to `k` visible entries nearest to `qpos`, walking outward.
fn scan_leaf(leaf: &Leaf, qpos: u16, k: usize, snapshot: &Snapshot, out: &mut Vec<(f64, u64)>) {
    let entries = &leaf.entries;
    let step = leaf.step();
    let mid = entries.partition_point(|e| e.pos < qpos);
    let (mut lo, mut hi) = (mid, mid);
    let mut taken = 0;
    let dist = |pos: u16| (pos as i32 - qpos as i32).unsigned_abs();
    while taken < k && (lo > 0 || hi < entries.len()) {
        let take_hi = match (lo > 0, hi < entries.len()) {
            (true, true) => dist(entries[hi].pos) <= dist(entries[lo - 1].pos),
            (false, true) => true,
            _ => false,
        };
        let e = if take_hi {
            hi += 1;
            entries[hi - 1]
        } else {
            lo -= 1;
            entries[lo]
        };
        if snapshot.visible(e.id) {
            out.push((dist(e.pos) as f64 * step, e.id));
            taken += 1;
        }
    }
    // Entries at the same distance as the last one taken may have lower ids.
    if taken == k {
        let edge = out.last().map(|c| c.0).unwrap_or(0.0);
        let below = entries[..lo].iter().rev();
        let above = entries[hi..].iter();
        for e in below.take_while(|e| dist(e.pos) as f64 * step <= edge) {
            if snapshot.visible(e.id) {
                out.push((edge, e.id));
            }
        }
        for e in above.take_while(|e| dist(e.pos) as f64 * step <= edge) {
            if snapshot.visible(e.id) {
                out.push((edge, e.id));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::leaf::LeafEntry;

    fn leaf(positions: &[(u64, u16)]) -> Leaf {
        let mut l = Leaf::empty(0);
        l.lo = 0.0;
        l.hi = 65535.0;
        for &(id, pos) in positions {
            l.insert(LeafEntry { id, pos });
        }
        l
    }

    #[test]
    fn walks_outward_by_distance() {
        let l = leaf(&[(1, 10), (2, 20), (3, 30), (4, 41), (5, 51)]);
        let mut out = Vec::new();
        scan_leaf(&l, 35, 3, &Snapshot::unbounded(), &mut out);
        let ids: Vec<u64> = out.iter().map(|c| c.1).collect();
        assert_eq!(ids, vec![3, 4, 2]);
    }

    #[test]
    fn respects_snapshot() {
        let l = leaf(&[(1, 10), (200, 11), (3, 12)]);
        let mut out = Vec::new();
        let snap = Snapshot {
            id_limit: 100,
            ..Snapshot::unbounded()
        };
        scan_leaf(&l, 11, 5, &snap, &mut out);
        let mut ids: Vec<u64> = out.iter().map(|c| c.1).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![1, 3]);
    }

    #[test]
    fn ties_at_the_cut_keep_lower_ids_reachable() {
        let l = leaf(&[(9, 5), (2, 5), (7, 5)]);
        let mut out = Vec::new();
        scan_leaf(&l, 5, 1, &Snapshot::unbounded(), &mut out);
        let best = out
            .iter()
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .unwrap();
        assert_eq!(best.1, 2);
    }
}
