//! Guided diffusion over item-entity relation rows.
//!
//! The forward process corrupts an item's binary relation row with Gaussian
//! noise under a linear beta schedule. A small MLP conditioned on the noisy
//! row, a learned step embedding, and the averaged embedding of the item's
//! interacting users predicts the clean row; it trains on the simplified
//! squared-error objective with uniformly sampled steps. Denoised rows are
//! turned back into a knowledge graph by keeping the top-q entities per item.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{InteractionGraph, KnowledgeGraph};
use crate::opt::{AdamConfig, AdamState};

/// Beta schedule and its running alpha-bar products, indexed by step 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Param("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Param(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    /// Build directly from betas. Zeros are allowed for degenerate test schedules.
    pub fn from_betas(beta: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Self { beta, alpha_bar }
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Alpha-bar at t-1, with the t=1 convention of 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::Param(format!("step {t} outside 1..={}", self.t_max())));
        }
        Ok(())
    }
}

/// Dense binary relation row of one item over all entities.
pub fn relation_row(kg: &KnowledgeGraph, item: usize) -> Array1<f64> {
    let mut row = Array1::zeros(kg.num_entities);
    for &(e, _) in &kg.item_neighbors[item] {
        row[e] = 1.0;
    }
    row
}

fn standard_normal(len: usize, rng: &mut impl RngCore) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.sample(StandardNormal))
}

/// Sample x_t ~ N(sqrt(alpha_bar_t) x0, (1 - alpha_bar_t) I).
pub fn forward_diffuse(
    x0: ArrayView1<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl RngCore,
) -> Result<Array1<f64>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let noise = standard_normal(x0.len(), rng);
    Ok(&x0.mapv(|x| x * ab.sqrt()) + &(noise * (1.0 - ab).sqrt()))
}

/// Mean embedding of the users interacting with `item`; zero when it has none.
pub fn guidance_embedding(item: usize, graph: &InteractionGraph, user_table: &Array2<f64>) -> Array1<f64> {
    let users = &graph.item_neighbors[item];
    let mut out = Array1::zeros(user_table.ncols());
    if users.is_empty() {
        return out;
    }
    for &u in users {
        out += &user_table.row(u);
    }
    out / users.len() as f64
}

/// Guidance vectors for every item, stacked row-wise.
pub fn guidance_table(graph: &InteractionGraph, user_table: &Array2<f64>) -> Array2<f64> {
    let d = user_table.ncols();
    let mut out = Array2::zeros((graph.num_items, d));
    for j in 0..graph.num_items {
        out.row_mut(j).assign(&guidance_embedding(j, graph, user_table));
    }
    out
}

/// One-hidden-layer MLP over [x_t || step_emb(t) || guidance] with a learned
/// step-embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub step_table: Array2<f64>,
    pub num_entities: usize,
    pub step_dim: usize,
    pub guide_dim: usize,
}

impl DenoiserParams {
    pub fn init(
        num_entities: usize,
        step_dim: usize,
        guide_dim: usize,
        hidden: usize,
        t_max: usize,
        scale: f64,
        rng: &mut impl RngCore,
    ) -> Self {
        let n_in = num_entities + step_dim + guide_dim;
        let mut gen2 = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            })
        };
        let w1 = gen2(hidden, n_in);
        let w2 = gen2(num_entities, hidden);
        let step_table = gen2(t_max, step_dim);
        Self {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(num_entities),
            step_table,
            num_entities,
            step_dim,
            guide_dim,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    fn input(&self, x_t: ArrayView1<f64>, t: usize, guidance: ArrayView1<f64>) -> Array1<f64> {
        concatenate![
            Axis(0),
            x_t,
            self.step_table.row(t - 1),
            guidance
        ]
    }
}

/// Gradients mirroring [`DenoiserParams`].
#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub step_table: Array2<f64>,
}

impl DenoiserGrads {
    pub fn zeros(p: &DenoiserParams) -> Self {
        Self {
            w1: Array2::zeros(p.w1.raw_dim()),
            b1: Array1::zeros(p.b1.raw_dim()),
            w2: Array2::zeros(p.w2.raw_dim()),
            b2: Array1::zeros(p.b2.raw_dim()),
            step_table: Array2::zeros(p.step_table.raw_dim()),
        }
    }
}

struct DenoiserCache {
    input: Array1<f64>,
    hidden_act: Array1<f64>,
}

fn predict_x0_cached(
    x_t: ArrayView1<f64>,
    t: usize,
    guidance: ArrayView1<f64>,
    params: &DenoiserParams,
) -> (Array1<f64>, DenoiserCache) {
    let input = params.input(x_t, t, guidance);
    let hidden_act = (params.w1.dot(&input) + &params.b1).mapv(f64::tanh);
    let out = params.w2.dot(&hidden_act) + &params.b2;
    (out, DenoiserCache { input, hidden_act })
}

/// Deterministic MLP prediction of the clean relation row.
pub fn predict_x0(
    x_t: ArrayView1<f64>,
    t: usize,
    guidance: ArrayView1<f64>,
    params: &DenoiserParams,
) -> Array1<f64> {
    predict_x0_cached(x_t, t, guidance, params).0
}

/// Accumulate parameter gradients for an upstream gradient on the output.
fn predict_x0_backward(
    t: usize,
    params: &DenoiserParams,
    cache: &DenoiserCache,
    d_out: &Array1<f64>,
    grads: &mut DenoiserGrads,
) {
    for (i, &g) in d_out.iter().enumerate() {
        if g != 0.0 {
            grads.w2.row_mut(i).scaled_add(g, &cache.hidden_act);
        }
    }
    grads.b2 += d_out;
    let dh = params.w2.t().dot(d_out);
    let dh_pre = &dh * &cache.hidden_act.mapv(|h| 1.0 - h * h);
    for (i, &g) in dh_pre.iter().enumerate() {
        if g != 0.0 {
            grads.w1.row_mut(i).scaled_add(g, &cache.input);
        }
    }
    grads.b1 += &dh_pre;
    let d_input = params.w1.t().dot(&dh_pre);
    let e = params.num_entities;
    grads
        .step_table
        .row_mut(t - 1)
        .scaled_add(1.0, &d_input.slice(s![e..e + params.step_dim]));
}

/// Squared-error reconstruction loss of one prediction together with its
/// parameter gradients. Exposed so external tests can verify the backward
/// pass against finite differences.
pub fn prediction_loss_gradients(
    params: &DenoiserParams,
    x0: ArrayView1<f64>,
    x_t: ArrayView1<f64>,
    t: usize,
    guidance: ArrayView1<f64>,
) -> (f64, DenoiserGrads) {
    let (pred, cache) = predict_x0_cached(x_t, t, guidance, params);
    let diff = &pred - &x0;
    let loss = diff.dot(&diff);
    let mut grads = DenoiserGrads::zeros(params);
    predict_x0_backward(t, params, &cache, &(&diff * 2.0), &mut grads);
    (loss, grads)
}

/// Posterior mean and fixed variance given a predicted clean row.
///
/// At t = 1 (or under a degenerate zero-noise schedule) this is deterministic.
pub fn posterior_step(
    x_t: ArrayView1<f64>,
    t: usize,
    x_hat0: ArrayView1<f64>,
    schedule: &NoiseSchedule,
    rng: &mut impl RngCore,
) -> Result<Array1<f64>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar_prev(t);
    let beta = schedule.beta_at(t);
    let one_minus = 1.0 - ab;
    if one_minus <= f64::EPSILON {
        return Ok(x_hat0.to_owned());
    }
    let alpha = 1.0 - beta;
    let coef0 = ab_prev.sqrt() * beta / one_minus;
    let coef_t = alpha.sqrt() * (1.0 - ab_prev) / one_minus;
    let mean = &x_hat0.mapv(|x| x * coef0) + &x_t.mapv(|x| x * coef_t);
    if t == 1 {
        return Ok(mean);
    }
    let var = beta * (1.0 - ab_prev) / one_minus;
    let noise = standard_normal(x_t.len(), rng);
    Ok(mean + noise * var.sqrt())
}

/// One reverse step: predict the clean row, then sample the posterior.
pub fn reverse_step(
    x_t: ArrayView1<f64>,
    t: usize,
    guidance: ArrayView1<f64>,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    rng: &mut impl RngCore,
) -> Result<Array1<f64>> {
    let x_hat0 = predict_x0(x_t, t, guidance, params);
    posterior_step(x_t, t, x_hat0.view(), schedule, rng)
}

/// Run the full reverse chain from pure noise down to a denoised row.
pub fn reverse_chain(
    guidance: ArrayView1<f64>,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    rng: &mut impl RngCore,
) -> Result<Array1<f64>> {
    let mut x = standard_normal(params.num_entities, rng);
    for t in (1..=schedule.t_max()).rev() {
        x = reverse_step(x.view(), t, guidance, params, schedule, rng)?;
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Feed a zero guidance vector instead of averaged user embeddings.
    pub disable_guidance: bool,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 64, lr: 1e-2, seed: 0, disable_guidance: false }
    }
}

struct DenoiserAdam {
    w1: AdamState<ndarray::Ix2>,
    b1: AdamState<ndarray::Ix1>,
    w2: AdamState<ndarray::Ix2>,
    b2: AdamState<ndarray::Ix1>,
    step_table: AdamState<ndarray::Ix2>,
    step: usize,
}

impl DenoiserAdam {
    fn new(p: &DenoiserParams) -> Self {
        Self {
            w1: AdamState::like(&p.w1),
            b1: AdamState::like(&p.b1),
            w2: AdamState::like(&p.w2),
            b2: AdamState::like(&p.b2),
            step_table: AdamState::like(&p.step_table),
            step: 0,
        }
    }

    fn apply(&mut self, cfg: &AdamConfig, params: &mut DenoiserParams, grads: &DenoiserGrads) {
        self.step += 1;
        let t = self.step;
        self.w1.update(cfg, t, &mut params.w1, &grads.w1);
        self.b1.update(cfg, t, &mut params.b1, &grads.b1);
        self.w2.update(cfg, t, &mut params.w2, &grads.w2);
        self.b2.update(cfg, t, &mut params.b2, &grads.b2);
        self.step_table.update(cfg, t, &mut params.step_table, &grads.step_table);
    }
}

/// Optimizer wrapper so interleaved training can keep moments across epochs.
pub struct DenoiserTrainer {
    adam: DenoiserAdam,
    adam_cfg: AdamConfig,
}

impl DenoiserTrainer {
    pub fn new(params: &DenoiserParams, lr: f64) -> Self {
        Self { adam: DenoiserAdam::new(params), adam_cfg: AdamConfig::with_lr(lr) }
    }

    /// One epoch over all items with minibatched updates. Returns the mean
    /// per-example squared-error loss of the epoch.
    pub fn epoch(
        &mut self,
        params: &mut DenoiserParams,
        kg: &KnowledgeGraph,
        guidance: &Array2<f64>,
        schedule: &NoiseSchedule,
        cfg: &DenoiserTrainConfig,
        rng: &mut impl RngCore,
    ) -> Result<f64> {
        let items: Vec<usize> = {
            let mut v: Vec<usize> = (0..kg.num_items).collect();
            v.shuffle(rng);
            v
        };
        let zero_guide = Array1::zeros(params.guide_dim);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in items.chunks(cfg.batch_size.max(1)) {
            let mut grads = DenoiserGrads::zeros(params);
            let mut batch_loss = 0.0;
            for &j in batch {
                let x0 = relation_row(kg, j);
                let t = rng.gen_range(1..=schedule.t_max());
                let x_t = forward_diffuse(x0.view(), t, schedule, rng)?;
                let guide = if cfg.disable_guidance {
                    zero_guide.view()
                } else {
                    guidance.row(j)
                };
                let (pred, cache) = predict_x0_cached(x_t.view(), t, guide, params);
                let diff = &pred - &x0;
                batch_loss += diff.dot(&diff);
                // d/dpred of ||pred - x0||^2, averaged over the batch
                let d_out = diff.mapv(|x| 2.0 * x / batch.len() as f64);
                predict_x0_backward(t, params, &cache, &d_out, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence("denoiser loss is not finite".into()));
            }
            self.adam.apply(&self.adam_cfg, params, &grads);
            epoch_loss += batch_loss;
            seen += batch.len();
        }
        Ok(epoch_loss / seen.max(1) as f64)
    }
}

/// Train the denoiser from scratch for `cfg.epochs`; returns the loss trace.
pub fn train_denoiser(
    params: &mut DenoiserParams,
    kg: &KnowledgeGraph,
    guidance: &Array2<f64>,
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
) -> Result<Vec<f64>> {
    if kg.num_triples() == 0 {
        return Err(Error::EmptyGraph("cannot train the denoiser on an empty KG".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = DenoiserTrainer::new(params, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        trace.push(trainer.epoch(params, kg, guidance, schedule, cfg, &mut rng)?);
    }
    Ok(trace)
}

/// Reconstruct a knowledge graph by keeping the top-q scored entities per item.
///
/// Relations of kept pairs copy the original triple where one existed and
/// fall back to the globally most frequent relation type otherwise. `q` is
/// clamped to the entity count.
pub fn generate_denoised_kg(
    kg: &KnowledgeGraph,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    guidance: &Array2<f64>,
    q: usize,
    rng: &mut impl RngCore,
) -> Result<KnowledgeGraph> {
    if q == 0 {
        return Err(Error::Param("top-q selection needs q >= 1".into()));
    }
    let q = q.min(kg.num_entities);
    let fallback_relation = kg.most_frequent_relation();
    let mut triples = Vec::with_capacity(kg.num_items * q);
    for j in 0..kg.num_items {
        let scores = reverse_chain(guidance.row(j), params, schedule, rng)?;
        let mut order: Vec<usize> = (0..kg.num_entities).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        for &e in order.iter().take(q) {
            let r = kg.relation_of(j, e).unwrap_or(fallback_relation);
            triples.push((j, r, e));
        }
    }
    let mut out = KnowledgeGraph::from_triples(kg.num_items, kg.num_entities, kg.num_relations, &triples)?;
    out.entity_ids = kg.entity_ids.clone();
    out.relation_ids = kg.relation_ids.clone();
    Ok(out)
}
