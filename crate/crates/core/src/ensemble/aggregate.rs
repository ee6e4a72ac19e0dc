use std::collections::HashMap;

use crate::tree::Neighbor;

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedHit {
    pub id: u64,
    pub score: u64,
    /// Rank in each tree, `None` where the tree did not return the id.
    pub ranks: Vec<Option<u32>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregatedResult {
    pub hits: Vec<AggregatedHit>,
}

impl AggregatedResult {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.id).collect()
    }
}

/// Borda aggregation: each tree gives `k - rank + 1` points to every id it returns.
pub fn borda(per_tree: &[Vec<Neighbor>], k: usize) -> AggregatedResult {
    let trees = per_tree.len();
    let mut acc: HashMap<u64, AggregatedHit> = HashMap::new();
    for (t, result) in per_tree.iter().enumerate() {
        for n in result {
            let hit = acc.entry(n.id).or_insert_with(|| AggregatedHit {
                id: n.id,
                score: 0,
                ranks: vec![None; trees],
            });
            hit.score += (k as u64 + 1).saturating_sub(n.rank as u64);
            hit.ranks[t] = Some(n.rank);
        }
    }
    let mut hits: Vec<AggregatedHit> = acc.into_values().collect();
    hits.sort_by(|a, b| b.score.cmp(&a.score).then(a.id.cmp(&b.id)));
    hits.truncate(k);
    AggregatedResult { hits }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MediaVote {
    pub media: u64,
    pub votes: u64,
}

/// Ranks media by vote count, ties by ascending media id.
pub fn rank_votes(votes: HashMap<u64, u64>) -> Vec<MediaVote> {
    let mut out: Vec<MediaVote> = votes
        .into_iter()
        .map(|(media, votes)| MediaVote { media, votes })
        .collect();
    out.sort_by(|a, b| b.votes.cmp(&a.votes).then(a.media.cmp(&b.media)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(id: u64, rank: u32) -> Neighbor {
        Neighbor {
            id,
            rank,
            distance: 0.0,
        }
    }

    #[test]
    fn unanimous_first_scores_three_k() {
        let r = borda(
            &[
                vec![n(5, 1), n(6, 2)],
                vec![n(5, 1)],
                vec![n(5, 1), n(7, 2)],
            ],
            100,
        );
        assert_eq!(r.hits[0].id, 5);
        assert_eq!(r.hits[0].score, 300);
        assert_eq!(r.hits[0].ranks, vec![Some(1), Some(1), Some(1)]);
        assert!(!r.ids().contains(&8));
    }

    #[test]
    fn ties_go_to_lower_id() {
        let r = borda(&[vec![n(9, 1)], vec![n(4, 1)]], 10);
        assert_eq!(r.ids(), vec![4, 9]);
    }

    #[test]
    fn votes_rank_by_count_then_id() {
        let v = rank_votes(HashMap::from([(3, 2), (1, 2), (8, 5)]));
        let order: Vec<u64> = v.iter().map(|m| m.media).collect();
        assert_eq!(order, vec![8, 1, 3]);
    }
}
