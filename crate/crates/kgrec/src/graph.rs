//! User-item interaction graphs and item-entity knowledge graphs.
//!
//! Input files use arbitrary string tokens for node ids; loaders re-index
//! everything to dense 0-based indices and keep the original tokens around
//! so graphs can be written back out losslessly.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Bipartite user-item graph with binary implicit feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    pub num_users: usize,
    pub num_items: usize,
    /// Deduplicated (user, item) pairs, sorted.
    pub edges: Vec<(usize, usize)>,
    /// Items adjacent to each user, sorted ascending.
    pub user_neighbors: Vec<Vec<usize>>,
    /// Users adjacent to each item, sorted ascending.
    pub item_neighbors: Vec<Vec<usize>>,
    /// Original id token per user index.
    pub user_ids: Vec<String>,
    /// Original id token per item index.
    pub item_ids: Vec<String>,
    /// Duplicate input lines dropped during construction.
    pub duplicates_dropped: usize,
}

impl InteractionGraph {
    /// Build from dense-indexed edges. Duplicates are dropped and counted.
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Result<Self> {
        for &(u, v) in edges {
            if u >= num_users || v >= num_items {
                return Err(Error::Reference(format!(
                    "edge ({u}, {v}) out of range for {num_users} users x {num_items} items"
                )));
            }
        }
        let mut dedup: Vec<(usize, usize)> = edges.to_vec();
        dedup.sort_unstable();
        let before = dedup.len();
        dedup.dedup();
        let duplicates_dropped = before - dedup.len();

        let mut user_neighbors = vec![Vec::new(); num_users];
        let mut item_neighbors = vec![Vec::new(); num_items];
        for &(u, v) in &dedup {
            user_neighbors[u].push(v);
            item_neighbors[v].push(u);
        }
        Ok(Self {
            num_users,
            num_items,
            edges: dedup,
            user_neighbors,
            item_neighbors,
            user_ids: (0..num_users).map(|i| i.to_string()).collect(),
            item_ids: (0..num_items).map(|i| i.to_string()).collect(),
            duplicates_dropped,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_neighbors[u].len()
    }

    pub fn item_degree(&self, v: usize) -> usize {
        self.item_neighbors[v].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.user_neighbors[u].binary_search(&v).is_ok()
    }

    /// Write as `user<TAB>item` lines using the original id tokens.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for &(u, v) in &self.edges {
            writeln!(out, "{}\t{}", self.user_ids[u], self.item_ids[v]).unwrap();
        }
        fs::write(path, out).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }

    fn item_index(&self) -> HashMap<&str, usize> {
        self.item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

/// Typed (item, relation, entity) triples linking items to side-information entities.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    pub num_items: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    /// Deduplicated (item, relation, entity) triples, sorted.
    pub triples: Vec<(usize, usize, usize)>,
    /// Per item: (entity, relation) neighbor pairs.
    pub item_neighbors: Vec<Vec<(usize, usize)>>,
    pub entity_ids: Vec<String>,
    pub relation_ids: Vec<String>,
    pub duplicates_dropped: usize,
}

impl KnowledgeGraph {
    pub fn from_triples(
        num_items: usize,
        num_entities: usize,
        num_relations: usize,
        triples: &[(usize, usize, usize)],
    ) -> Result<Self> {
        for &(j, r, e) in triples {
            if j >= num_items {
                return Err(Error::Reference(format!("triple item {j} >= num_items {num_items}")));
            }
            if e >= num_entities || r >= num_relations {
                return Err(Error::Reference(format!(
                    "triple ({j}, {r}, {e}) out of range for {num_relations} relations x {num_entities} entities"
                )));
            }
        }
        let mut dedup: Vec<(usize, usize, usize)> = triples.to_vec();
        dedup.sort_unstable();
        let before = dedup.len();
        dedup.dedup();
        let duplicates_dropped = before - dedup.len();

        let mut item_neighbors = vec![Vec::new(); num_items];
        for &(j, r, e) in &dedup {
            item_neighbors[j].push((e, r));
        }
        Ok(Self {
            num_items,
            num_entities,
            num_relations,
            triples: dedup,
            item_neighbors,
            entity_ids: (0..num_entities).map(|i| i.to_string()).collect(),
            relation_ids: (0..num_relations).map(|i| i.to_string()).collect(),
            duplicates_dropped,
        })
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    /// Most frequent relation type, ties broken by lower index. 0 for an empty KG.
    pub fn most_frequent_relation(&self) -> usize {
        let mut counts = vec![0usize; self.num_relations.max(1)];
        for &(_, r, _) in &self.triples {
            counts[r] += 1;
        }
        counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(r, _)| r)
            .unwrap_or(0)
    }

    /// Relation of an existing (item, entity) pair, if any.
    pub fn relation_of(&self, item: usize, entity: usize) -> Option<usize> {
        self.item_neighbors[item]
            .iter()
            .find(|&&(e, _)| e == entity)
            .map(|&(_, r)| r)
    }

    /// Write as `item<TAB>relation<TAB>entity` lines using original tokens.
    pub fn save(&self, path: &Path, graph: &InteractionGraph) -> Result<()> {
        let mut out = String::new();
        for &(j, r, e) in &self.triples {
            writeln!(
                out,
                "{}\t{}\t{}",
                graph.item_ids[j], self.relation_ids[r], self.entity_ids[e]
            )
            .unwrap();
        }
        fs::write(path, out).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Load a `user<TAB>item` edge list. `#`-prefixed lines are comments.
///
/// Ids are re-indexed to dense 0-based indices in order of first appearance.
pub fn load_interactions(path: &Path) -> Result<InteractionGraph> {
    let lines = read_lines(path)?;
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut edges = Vec::new();

    for (lineno, line) in lines.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let (u_tok, v_tok) = match (tokens.next(), tokens.next(), tokens.next()) {
            (Some(u), Some(v), None) => (u, v),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected two tokens, got {line:?}"),
                })
            }
        };
        let u = *user_index.entry(u_tok.to_owned()).or_insert_with(|| {
            user_ids.push(u_tok.to_owned());
            user_ids.len() - 1
        });
        let v = *item_index.entry(v_tok.to_owned()).or_insert_with(|| {
            item_ids.push(v_tok.to_owned());
            item_ids.len() - 1
        });
        edges.push((u, v));
    }
    if edges.is_empty() {
        return Err(Error::EmptyGraph(format!("{} holds no edges", path.display())));
    }
    let mut graph = InteractionGraph::from_edges(user_ids.len(), item_ids.len(), &edges)?;
    graph.user_ids = user_ids;
    graph.item_ids = item_ids;
    Ok(graph)
}

/// Load `item<TAB>relation<TAB>entity` triples against an already-loaded graph.
///
/// Item tokens must resolve within `graph`; unknown relation or entity tokens
/// allocate fresh indices.
pub fn load_kg(path: &Path, graph: &InteractionGraph) -> Result<KnowledgeGraph> {
    let lines = read_lines(path)?;
    let item_index = graph.item_index();
    let mut entity_index: HashMap<String, usize> = HashMap::new();
    let mut relation_index: HashMap<String, usize> = HashMap::new();
    let mut entity_ids = Vec::new();
    let mut relation_ids = Vec::new();
    let mut triples = Vec::new();

    for (lineno, line) in lines.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let (j_tok, r_tok, e_tok) = match (tokens.next(), tokens.next(), tokens.next(), tokens.next()) {
            (Some(j), Some(r), Some(e), None) => (j, r, e),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected three tokens, got {line:?}"),
                })
            }
        };
        let j = *item_index.get(j_tok).ok_or_else(|| {
            Error::Reference(format!(
                "{}:{}: item {j_tok:?} not present in the interaction graph",
                path.display(),
                lineno + 1
            ))
        })?;
        let r = *relation_index.entry(r_tok.to_owned()).or_insert_with(|| {
            relation_ids.push(r_tok.to_owned());
            relation_ids.len() - 1
        });
        let e = *entity_index.entry(e_tok.to_owned()).or_insert_with(|| {
            entity_ids.push(e_tok.to_owned());
            entity_ids.len() - 1
        });
        triples.push((j, r, e));
    }

    let mut kg = KnowledgeGraph::from_triples(
        graph.num_items,
        entity_ids.len(),
        relation_ids.len().max(1),
        &triples,
    )?;
    kg.entity_ids = entity_ids;
    if !relation_ids.is_empty() {
        kg.relation_ids = relation_ids;
    }
    Ok(kg)
}

/// Leave-n-out split. Test pairs are removed from the training graph.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: InteractionGraph,
    /// Held-out (user, item) pairs.
    pub test: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Hold out `holdout_per_user` items per user with degree above the holdout.
///
/// Users with degree <= holdout contribute no test pairs.
pub fn split_train_test(graph: &InteractionGraph, holdout_per_user: usize, seed: u64) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held: HashSet<(usize, usize)> = HashSet::new();
    let mut test = Vec::new();
    for u in 0..graph.num_users {
        if graph.user_degree(u) <= holdout_per_user {
            continue;
        }
        let mut items = graph.user_neighbors[u].clone();
        items.shuffle(&mut rng);
        for &v in items.iter().take(holdout_per_user) {
            held.insert((u, v));
            test.push((u, v));
        }
    }
    let train_edges: Vec<(usize, usize)> = graph
        .edges
        .iter()
        .copied()
        .filter(|e| !held.contains(e))
        .collect();
    if train_edges.is_empty() {
        return Err(Error::EmptyGraph("split left no training edges".into()));
    }
    let mut train = InteractionGraph::from_edges(graph.num_users, graph.num_items, &train_edges)?;
    train.user_ids = graph.user_ids.clone();
    train.item_ids = graph.item_ids.clone();
    Ok(DatasetSplit { train, test, seed })
}
