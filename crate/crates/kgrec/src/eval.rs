//! Top-N ranking evaluation: Recall@N and NDCG@N over held-out interactions,
//! plus simple baseline scorers.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::InteractionGraph;

/// Scores every item for a user. Implementations must be deterministic.
pub trait Scorer: Sync {
    fn score_items(&self, user: usize, num_items: usize) -> Vec<f64>;
}

/// Per-user ranked lists are implicit; we keep the metric values.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RankingResult {
    /// (user, recall, ndcg) for every evaluated user.
    pub per_user: Vec<(usize, f64, f64)>,
    pub mean_recall: f64,
    pub mean_ndcg: f64,
    pub top_n: usize,
}

/// |top-N ∩ relevant| / |relevant|. Caller must skip empty relevant sets.
pub fn recall_at_n(ranked: &[usize], relevant: &HashSet<usize>, n: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(n).filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-gain NDCG with discount 1/log2(rank + 1), 1-based ranks.
pub fn ndcg_at_n(ranked: &[usize], relevant: &HashSet<usize>, n: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(rank0, _)| 1.0 / ((rank0 + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(n))
        .map(|rank0| 1.0 / ((rank0 + 2) as f64).log2())
        .sum();
    dcg / ideal
}

/// Rank all items for a user by descending score, ties broken by item index.
pub fn rank_items(scores: &[f64], mask: &HashSet<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|i| !mask.contains(i)).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Full-ranking protocol: score all items, mask training positives, rank
/// deterministically, and average both metrics over users with test items.
pub fn evaluate(
    scorer: &dyn Scorer,
    train: &InteractionGraph,
    test: &[(usize, usize)],
    top_n: usize,
) -> Result<RankingResult> {
    if top_n == 0 {
        return Err(Error::Param("top_n must be >= 1".into()));
    }
    let mut relevant_by_user: Vec<Vec<usize>> = vec![Vec::new(); train.num_users];
    for &(u, v) in test {
        relevant_by_user[u].push(v);
    }
    let users: Vec<usize> = (0..train.num_users)
        .filter(|&u| !relevant_by_user[u].is_empty())
        .collect();
    let per_user: Vec<(usize, f64, f64)> = users
        .par_iter()
        .map(|&u| {
            let scores = scorer.score_items(u, train.num_items);
            let mask: HashSet<usize> = train.user_neighbors[u].iter().copied().collect();
            let ranked = rank_items(&scores, &mask);
            let relevant: HashSet<usize> = relevant_by_user[u].iter().copied().collect();
            (
                u,
                recall_at_n(&ranked, &relevant, top_n),
                ndcg_at_n(&ranked, &relevant, top_n),
            )
        })
        .collect();
    let count = per_user.len().max(1) as f64;
    let mean_recall = per_user.iter().map(|r| r.1).sum::<f64>() / count;
    let mean_ndcg = per_user.iter().map(|r| r.2).sum::<f64>() / count;
    Ok(RankingResult { per_user, mean_recall, mean_ndcg, top_n })
}

/// Ranks every item by its training degree, identically for all users.
pub struct PopularityScorer {
    degrees: Vec<f64>,
}

pub fn baseline_popularity(train: &InteractionGraph) -> Result<PopularityScorer> {
    if train.num_edges() == 0 {
        return Err(Error::EmptyGraph("popularity baseline needs a nonempty graph".into()));
    }
    Ok(PopularityScorer {
        degrees: (0..train.num_items).map(|v| train.item_degree(v) as f64).collect(),
    })
}

impl Scorer for PopularityScorer {
    fn score_items(&self, _user: usize, _num_items: usize) -> Vec<f64> {
        self.degrees.clone()
    }
}

/// Deterministic pseudo-random scores per (user, item); a no-signal floor.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score_items(&self, user: usize, num_items: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ (user as u64) << 20);
        (0..num_items).map(|_| rng.gen::<f64>()).collect()
    }
}
