//! Synthetic dataset generator with planted cluster structure.
//!
//! Users, items, and entities are partitioned into contiguous clusters.
//! Interactions are dense inside a cluster and sparse across clusters, and
//! every item gets a handful of "relevant" triples into its cluster's entity
//! pool plus a few "noise" triples into foreign entities. The planted labels
//! give downstream tests an unambiguous notion of a task-relevant triple.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{InteractionGraph, KnowledgeGraph};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_entities: usize,
    pub num_clusters: usize,
    pub intra_cluster_prob: f64,
    pub noise_edge_prob: f64,
    pub relevant_relations_per_item: usize,
    pub noise_relations_per_item: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 500,
            num_items: 300,
            num_entities: 60,
            num_clusters: 5,
            intra_cluster_prob: 0.2,
            noise_edge_prob: 0.005,
            relevant_relations_per_item: 3,
            noise_relations_per_item: 1,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.num_users,
            self.num_items,
            self.num_entities,
            self.num_clusters,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Param("all synthetic counts must be >= 1".into()));
        }
        for (name, p) in [
            ("intra_cluster_prob", self.intra_cluster_prob),
            ("noise_edge_prob", self.noise_edge_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Param(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let pool = self.num_entities / self.num_clusters;
        if pool < self.relevant_relations_per_item {
            return Err(Error::Param(format!(
                "entity pool per cluster ({pool}) smaller than relevant_relations_per_item ({})",
                self.relevant_relations_per_item
            )));
        }
        if self.num_entities - pool < self.noise_relations_per_item {
            return Err(Error::Param(format!(
                "not enough out-of-pool entities for {} noise relations per item",
                self.noise_relations_per_item
            )));
        }
        Ok(())
    }
}

/// Ground-truth cluster assignments behind a generated dataset.
#[derive(Debug, Clone)]
pub struct PlantedLabels {
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
    pub entity_cluster: Vec<usize>,
    /// Every generated triple as (item, entity, relevant?).
    pub triple_labels: Vec<(usize, usize, bool)>,
}

impl PlantedLabels {
    /// A (item, entity) pair is planted-relevant iff the entity belongs to
    /// the item's cluster pool. Defined for pairs never generated as triples.
    pub fn is_relevant(&self, item: usize, entity: usize) -> bool {
        self.item_cluster[item] == self.entity_cluster[entity]
    }
}

/// Assign `n` indices to `k` contiguous clusters as evenly as possible.
fn contiguous_clusters(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| (i * k) / n).map(|c| c.min(k - 1)).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(InteractionGraph, KnowledgeGraph, PlantedLabels)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let user_cluster = contiguous_clusters(spec.num_users, spec.num_clusters);
    let item_cluster = contiguous_clusters(spec.num_items, spec.num_clusters);
    let entity_cluster = contiguous_clusters(spec.num_entities, spec.num_clusters);
    let pools: Vec<Vec<usize>> = (0..spec.num_clusters)
        .map(|c| (0..spec.num_entities).filter(|&e| entity_cluster[e] == c).collect())
        .collect();

    let mut edges = Vec::new();
    for u in 0..spec.num_users {
        for v in 0..spec.num_items {
            let p = if user_cluster[u] == item_cluster[v] {
                spec.intra_cluster_prob
            } else {
                spec.noise_edge_prob
            };
            if rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    // Keep every node attached so degrees stay positive.
    for u in 0..spec.num_users {
        if !edges.iter().any(|&(eu, _)| eu == u) {
            let c = user_cluster[u];
            let v = (0..spec.num_items).find(|&v| item_cluster[v] == c).unwrap_or(0);
            edges.push((u, v));
        }
    }
    let mut item_seen = vec![false; spec.num_items];
    for &(_, v) in &edges {
        item_seen[v] = true;
    }
    for v in 0..spec.num_items {
        if !item_seen[v] {
            let c = item_cluster[v];
            let u = (0..spec.num_users).find(|&u| user_cluster[u] == c).unwrap_or(0);
            edges.push((u, v));
        }
    }
    let graph = InteractionGraph::from_edges(spec.num_users, spec.num_items, &edges)?;

    let num_relations = 3;
    let mut triples = Vec::new();
    let mut triple_labels = Vec::new();
    for j in 0..spec.num_items {
        let pool = &pools[item_cluster[j]];
        let mut relevant = pool.clone();
        relevant.shuffle(&mut rng);
        relevant.truncate(spec.relevant_relations_per_item);
        let mut foreign: Vec<usize> = (0..spec.num_entities)
            .filter(|&e| entity_cluster[e] != item_cluster[j])
            .collect();
        foreign.shuffle(&mut rng);
        foreign.truncate(spec.noise_relations_per_item);
        for &e in &relevant {
            triples.push((j, rng.gen_range(0..num_relations), e));
            triple_labels.push((j, e, true));
        }
        for &e in &foreign {
            triples.push((j, rng.gen_range(0..num_relations), e));
            triple_labels.push((j, e, false));
        }
    }
    let kg = KnowledgeGraph::from_triples(spec.num_items, spec.num_entities, num_relations, &triples)?;

    Ok((
        graph,
        kg,
        PlantedLabels { user_cluster, item_cluster, entity_cluster, triple_labels },
    ))
}

/// Write `interactions.tsv`, `kg.tsv`, and `labels.tsv` into `dir`.
pub fn write_synthetic(
    dir: &Path,
    graph: &InteractionGraph,
    kg: &KnowledgeGraph,
    labels: &PlantedLabels,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    graph.save(&dir.join("interactions.tsv"))?;
    kg.save(&dir.join("kg.tsv"), graph)?;
    let mut out = String::new();
    for &(j, e, relevant) in &labels.triple_labels {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            graph.item_ids[j],
            kg.entity_ids[e],
            if relevant { "relevant" } else { "noise" }
        ));
    }
    let path = dir.join("labels.tsv");
    fs::write(&path, out).map_err(|e| Error::Io { path, source: e })
}
