//! End-to-end training: random-walk attention, denoiser warm-up, denoised
//! contrastive view, joint BPR + InfoNCE minibatch descent, and per-epoch
//! ranking metrics.

use ndarray::{Array2, Ix2};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    generate_denoised_kg, guidance_table, DenoiserParams, DenoiserTrainConfig, DenoiserTrainer,
    NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RankingResult, Scorer};
use crate::graph::{InteractionGraph, KnowledgeGraph};
use crate::model::{
    joint_forward_backward, propagate, EmbeddingTables, JointConfig, LossBreakdown,
};
use crate::opt::{AdamConfig, AdamState};
use crate::rwr::{
    build_attention_matrix, build_propagation_operator, AttentionMatrix, PropagationOperator,
    WalkConfig,
};

/// Every knob of a training run. Defaults are the recommended settings for
/// the desk-scale datasets this crate targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the two InfoNCE terms.
    pub theta1: f64,
    /// Weight of the L2 penalty.
    pub theta2: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub dim: usize,
    pub layers: usize,
    /// Blend factor of the random-walk attention matrix.
    pub xi: f64,
    pub num_paths: usize,
    pub path_length: usize,
    pub restart_prob: f64,
    /// Diffusion steps.
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Entities kept per item when reconstructing the denoised view.
    pub top_q: usize,
    /// Regenerate the denoised view every this many epochs.
    pub refresh_period: usize,
    pub denoiser_epochs: usize,
    pub denoiser_lr: f64,
    pub denoiser_batch: usize,
    pub denoiser_hidden: usize,
    pub step_dim: usize,
    /// Negative samples per observed interaction.
    pub negatives: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub top_n: usize,
    /// Compute ranking metrics every this many epochs (0 = only implicitly
    /// via [`TrainedModel::evaluate`] after training).
    pub eval_every: usize,
    /// Drop the walk-based attention term (xi effectively 0).
    pub disable_attention: bool,
    /// Feed zero guidance into the denoiser.
    pub disable_guidance: bool,
    /// Drop the contrastive branch (theta1 effectively 0).
    pub disable_contrastive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1024,
            lr: 1e-3,
            theta1: 1e-2,
            theta2: 1e-5,
            tau: 0.5,
            dim: 32,
            layers: 2,
            xi: 0.7,
            num_paths: 12,
            path_length: 50,
            restart_prob: 0.15,
            t_max: 10,
            beta_start: 1e-4,
            beta_end: 0.02,
            top_q: 1,
            refresh_period: 1,
            denoiser_epochs: 1,
            denoiser_lr: 1e-2,
            denoiser_batch: 64,
            denoiser_hidden: 64,
            step_dim: 8,
            negatives: 1,
            init_scale: 0.1,
            seed: 0,
            top_n: 20,
            eval_every: 0,
            disable_attention: false,
            disable_guidance: false,
            disable_contrastive: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("dim", self.dim),
            ("t_max", self.t_max),
            ("top_q", self.top_q),
            ("refresh_period", self.refresh_period),
            ("negatives", self.negatives),
            ("top_n", self.top_n),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be >= 1")));
            }
        }
        if self.lr <= 0.0 || self.denoiser_lr < 0.0 {
            return Err(Error::Param("learning rates must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Param("temperature must be positive".into()));
        }
        if self.xi < 0.0 || self.theta1 < 0.0 || self.theta2 < 0.0 {
            return Err(Error::Param("xi, theta1 and theta2 must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.restart_prob) {
            return Err(Error::Param("restart_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn walk_config(&self) -> WalkConfig {
        WalkConfig {
            num_paths: self.num_paths,
            path_length: self.path_length,
            restart_prob: self.restart_prob,
            seed: self.seed,
        }
    }
}

/// Loss and metric record of one epoch; serialized as one JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub bpr: f64,
    pub infonce_user: f64,
    pub infonce_item: f64,
    pub total: f64,
    pub denoiser_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
}

/// Final propagated user/item embeddings; scores by inner product.
#[derive(Debug, Clone)]
pub struct EmbeddingScorer {
    pub user_final: Array2<f64>,
    pub item_final: Array2<f64>,
}

impl Scorer for EmbeddingScorer {
    fn score_items(&self, user: usize, num_items: usize) -> Vec<f64> {
        let u = self.user_final.row(user);
        (0..num_items).map(|v| u.dot(&self.item_final.row(v))).collect()
    }
}

/// Everything produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub tables: EmbeddingTables,
    pub schedule: NoiseSchedule,
    pub attention: AttentionMatrix,
    pub denoised_kg: Option<KnowledgeGraph>,
    pub history: Vec<EpochMetrics>,
    pub config: TrainConfig,
}

impl TrainedModel {
    /// Final embeddings on the main (original-KG) view.
    pub fn scorer(&self, graph: &InteractionGraph, kg: &KnowledgeGraph) -> Result<EmbeddingScorer> {
        let op = operator(graph, &self.attention, &self.config)?;
        Ok(scorer_for(&self.tables, &op, kg))
    }

    pub fn evaluate(
        &self,
        graph: &InteractionGraph,
        kg: &KnowledgeGraph,
        test: &[(usize, usize)],
    ) -> Result<RankingResult> {
        let scorer = self.scorer(graph, kg)?;
        evaluate(&scorer, graph, test, self.config.top_n)
    }
}

fn operator(
    graph: &InteractionGraph,
    attention: &AttentionMatrix,
    cfg: &TrainConfig,
) -> Result<PropagationOperator> {
    let xi = if cfg.disable_attention { 0.0 } else { cfg.xi };
    build_propagation_operator(graph, attention, xi)
}

fn scorer_for(
    tables: &EmbeddingTables,
    op: &PropagationOperator,
    kg: &KnowledgeGraph,
) -> EmbeddingScorer {
    let enh = crate::kg_embed::aggregate_kg(&tables.kg, kg, &tables.item);
    let prop = propagate(op, &tables.user, &enh.output, tables.layers);
    EmbeddingScorer { user_final: prop.user_final, item_final: prop.item_final }
}

/// Sample one negative per (user, positive) interaction, `negatives` times.
fn sample_triples(
    graph: &InteractionGraph,
    negatives: usize,
    rng: &mut impl RngCore,
) -> Vec<(usize, usize, usize)> {
    let mut triples = Vec::with_capacity(graph.num_edges() * negatives);
    for &(u, pos) in &graph.edges {
        for _ in 0..negatives {
            // rejection-sample an unobserved item; degree < num_items is
            // guaranteed unless the user interacted with everything
            if graph.user_degree(u) >= graph.num_items {
                continue;
            }
            let neg = loop {
                let cand = rng.gen_range(0..graph.num_items);
                if !graph.has_edge(u, cand) {
                    break cand;
                }
            };
            triples.push((u, pos, neg));
        }
    }
    triples.shuffle(rng);
    triples
}

fn unique_sorted(values: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = values.collect();
    v.sort_unstable();
    v.dedup();
    v
}

struct AdamBank {
    user: AdamState<Ix2>,
    item: AdamState<Ix2>,
    entity: AdamState<Ix2>,
    relation: AdamState<Ix2>,
    w: AdamState<Ix2>,
    step: usize,
}

impl AdamBank {
    fn new(tables: &EmbeddingTables) -> Self {
        Self {
            user: AdamState::like(&tables.user),
            item: AdamState::like(&tables.item),
            entity: AdamState::like(&tables.kg.entity_table),
            relation: AdamState::like(&tables.kg.relation_table),
            w: AdamState::like(&tables.kg.w),
            step: 0,
        }
    }

    fn apply(&mut self, cfg: &AdamConfig, tables: &mut EmbeddingTables, grads: &crate::model::JointGrads) {
        self.step += 1;
        self.user.update(cfg, self.step, &mut tables.user, &grads.user);
        self.item.update(cfg, self.step, &mut tables.item, &grads.item);
        self.entity.update(cfg, self.step, &mut tables.kg.entity_table, &grads.entity);
        self.relation.update(cfg, self.step, &mut tables.kg.relation_table, &grads.relation);
        self.w.update(cfg, self.step, &mut tables.kg.w, &grads.w);
    }
}

/// Train a model from scratch on `graph` and `kg`.
///
/// When `test` pairs are given and `eval_every > 0`, ranking metrics are
/// recorded in the matching epochs. The run is fully determined by the
/// config; the same config on the same data reproduces the history and the
/// parameters bit for bit.
pub fn train(
    graph: &InteractionGraph,
    kg: &KnowledgeGraph,
    cfg: &TrainConfig,
    test: Option<&[(usize, usize)]>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if graph.num_edges() == 0 {
        return Err(Error::EmptyGraph("cannot train on a graph without interactions".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = NoiseSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end)?;

    let attention = if cfg.disable_attention {
        AttentionMatrix::zeros(graph, cfg.walk_config())
    } else {
        build_attention_matrix(graph, &cfg.walk_config())?
    };
    let op = operator(graph, &attention, cfg)?;

    let denoiser = DenoiserParams::init(
        kg.num_entities.max(1),
        cfg.step_dim,
        cfg.dim,
        cfg.denoiser_hidden,
        cfg.t_max,
        cfg.init_scale,
        &mut rng,
    );
    let mut tables = EmbeddingTables::init(
        graph.num_users,
        graph.num_items,
        kg.num_entities,
        kg.num_relations,
        cfg.dim,
        cfg.layers,
        denoiser,
        cfg.init_scale,
        &mut rng,
    );

    let contrastive = !cfg.disable_contrastive && cfg.theta1 > 0.0 && kg.num_triples() > 0;
    let mut denoiser_trainer = DenoiserTrainer::new(&tables.denoiser, cfg.denoiser_lr);
    let denoiser_cfg = DenoiserTrainConfig {
        epochs: cfg.denoiser_epochs,
        batch_size: cfg.denoiser_batch,
        lr: cfg.denoiser_lr,
        seed: cfg.seed,
        disable_guidance: cfg.disable_guidance,
    };
    let mut denoised_kg: Option<KnowledgeGraph> = None;

    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut adam = AdamBank::new(&tables);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        // 1) advance the denoiser on the current guidance, then refresh the
        //    contrastive view on schedule
        let mut denoiser_loss = 0.0;
        if contrastive {
            let guidance = if cfg.disable_guidance {
                Array2::zeros((graph.num_items, cfg.dim))
            } else {
                guidance_table(graph, &tables.user)
            };
            for _ in 0..cfg.denoiser_epochs {
                denoiser_loss = denoiser_trainer.epoch(
                    &mut tables.denoiser,
                    kg,
                    &guidance,
                    &schedule,
                    &denoiser_cfg,
                    &mut rng,
                )?;
            }
            if denoised_kg.is_none() || (epoch - 1) % cfg.refresh_period == 0 {
                denoised_kg =
                    Some(generate_denoised_kg(kg, &tables.denoiser, &schedule, &guidance, cfg.top_q, &mut rng)?);
            }
        }

        // 2) joint descent over shuffled BPR triples
        let triples = sample_triples(graph, cfg.negatives, &mut rng);
        if triples.is_empty() {
            return Err(Error::EmptyGraph("no trainable triples: every user saw every item".into()));
        }
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in triples.chunks(cfg.batch_size) {
            let joint = JointConfig {
                theta1: if contrastive { cfg.theta1 } else { 0.0 },
                theta2: cfg.theta2,
                tau: cfg.tau,
                user_batch: unique_sorted(chunk.iter().map(|t| t.0)),
                item_batch: unique_sorted(chunk.iter().map(|t| t.1)),
            };
            let (breakdown, grads): (LossBreakdown, _) =
                joint_forward_backward(&tables, &op, kg, denoised_kg.as_ref(), chunk, &joint)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch}: joint loss is not finite")));
            }
            adam.apply(&adam_cfg, &mut tables, &grads);
            sums.0 += breakdown.bpr;
            sums.1 += breakdown.infonce_user;
            sums.2 += breakdown.infonce_item;
            sums.3 += breakdown.total;
            batches += 1;
        }
        let n = batches as f64;

        // 3) optional ranking metrics
        let mut recall = None;
        let mut ndcg = None;
        if let Some(pairs) = test {
            if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 && !pairs.is_empty() {
                let scorer = scorer_for(&tables, &op, kg);
                let res = evaluate(&scorer, graph, pairs, cfg.top_n)?;
                recall = Some(res.mean_recall);
                ndcg = Some(res.mean_ndcg);
            }
        }

        history.push(EpochMetrics {
            epoch,
            bpr: sums.0 / n,
            infonce_user: sums.1 / n,
            infonce_item: sums.2 / n,
            total: sums.3 / n,
            denoiser_loss,
            recall,
            ndcg,
        });
    }

    Ok(TrainedModel { tables, schedule, attention, denoised_kg, history, config: cfg.clone() })
}
