//! Trainable tables, attention-aware propagation, ranking and contrastive
//! losses, and the hand-written backward pass for the joint objective.
//!
//! Two views share one propagation operator: the main view enhances items
//! with the original knowledge graph, the contrastive view with the denoised
//! one. BPR drives ranking on the main view; InfoNCE ties the two views
//! together. All gradient paths are checked against finite differences.

use ndarray::Array2;
use rand::RngCore;
use rand_distr::StandardNormal;

use crate::diffusion::DenoiserParams;
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::kg_embed::{aggregate_kg, aggregate_kg_backward, AggregateForward, KgEmbeddingParams, KgGrads};
use crate::rwr::PropagationOperator;

/// All trainable state of the recommender.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
    pub kg: KgEmbeddingParams,
    pub denoiser: DenoiserParams,
    pub dim: usize,
    pub layers: usize,
}

impl EmbeddingTables {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        num_users: usize,
        num_items: usize,
        num_entities: usize,
        num_relations: usize,
        dim: usize,
        layers: usize,
        denoiser: DenoiserParams,
        scale: f64,
        rng: &mut impl RngCore,
    ) -> Self {
        use rand::Rng;
        let mut gen = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            })
        };
        let user = gen(num_users, dim);
        let item = gen(num_items, dim);
        let entity = gen(num_entities.max(1), dim);
        let relation = gen(num_relations.max(1), dim);
        let w = gen(dim, 2 * dim);
        EmbeddingTables {
            user,
            item,
            kg: KgEmbeddingParams::new(entity, relation, w),
            denoiser,
            dim,
            layers,
        }
    }
}

/// Cached per-layer embeddings of one propagation pass.
#[derive(Debug, Clone)]
pub struct PropagationForward {
    pub user_final: Array2<f64>,
    pub item_final: Array2<f64>,
    layers: usize,
}

fn users_from_items(op: &PropagationOperator, items: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((op.num_users, items.ncols()));
    for &(u, v, w) in &op.entries {
        let src = items.row(v).to_owned();
        out.row_mut(u).scaled_add(w, &src);
    }
    out
}

fn items_from_users(op: &PropagationOperator, users: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((op.num_items, users.ncols()));
    for &(u, v, w) in &op.entries {
        let src = users.row(u).to_owned();
        out.row_mut(v).scaled_add(w, &src);
    }
    out
}

/// Alternate propagation for `layers` rounds and average all layer outputs
/// (layer 0 included) into the final embeddings.
pub fn propagate(
    op: &PropagationOperator,
    user0: &Array2<f64>,
    item0: &Array2<f64>,
    layers: usize,
) -> PropagationForward {
    let mut user_sum = user0.clone();
    let mut item_sum = item0.clone();
    let mut user_cur = user0.clone();
    let mut item_cur = item0.clone();
    for _ in 0..layers {
        let next_user = users_from_items(op, &item_cur);
        let next_item = items_from_users(op, &user_cur);
        user_sum += &next_user;
        item_sum += &next_item;
        user_cur = next_user;
        item_cur = next_item;
    }
    let denom = (layers + 1) as f64;
    PropagationForward {
        user_final: user_sum / denom,
        item_final: item_sum / denom,
        layers,
    }
}

/// Backward pass of [`propagate`]: gradients on the final embeddings mapped
/// back to gradients on the layer-0 inputs. The operator is linear, so no
/// forward cache beyond the layer count is needed.
pub fn propagate_backward(
    op: &PropagationOperator,
    fwd: &PropagationForward,
    d_user_final: &Array2<f64>,
    d_item_final: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let layers = fwd.layers;
    let denom = (layers + 1) as f64;
    // every layer output receives d_final / (L + 1)
    let seed_user = d_user_final / denom;
    let seed_item = d_item_final / denom;
    // reverse recurrence: g^{l-1} = seed + Op · g^l, with Op mapping the
    // opposite side back (user^{l} = Op item^{l-1}, item^{l} = Opᵀ user^{l-1})
    let mut carry_user = seed_user.clone();
    let mut carry_item = seed_item.clone();
    for _ in 0..layers {
        let to_item = items_from_users(op, &carry_user);
        let to_user = users_from_items(op, &carry_item);
        carry_user = &to_user + &seed_user;
        carry_item = &to_item + &seed_item;
    }
    (carry_user, carry_item)
}

/// Inner-product preference score.
pub fn predict(user_row: ndarray::ArrayView1<f64>, item_row: ndarray::ArrayView1<f64>) -> f64 {
    user_row.dot(&item_row)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean of -log sigmoid(y_pos - y_neg) over triples, with gradients on the
/// final user/item rows accumulated into the provided buffers.
pub fn bpr_loss(
    user_final: &Array2<f64>,
    item_final: &Array2<f64>,
    triples: &[(usize, usize, usize)],
    d_user: &mut Array2<f64>,
    d_item: &mut Array2<f64>,
) -> f64 {
    assert!(!triples.is_empty(), "bpr_loss needs at least one triple");
    let n = triples.len() as f64;
    let mut loss = 0.0;
    for &(u, pos, neg) in triples {
        let margin = predict(user_final.row(u), item_final.row(pos))
            - predict(user_final.row(u), item_final.row(neg));
        let s = sigmoid(margin);
        loss += -s.ln();
        let d_margin = (s - 1.0) / n;
        let diff = &item_final.row(pos) - &item_final.row(neg);
        d_user.row_mut(u).scaled_add(d_margin, &diff);
        let u_row = user_final.row(u).to_owned();
        d_item.row_mut(pos).scaled_add(d_margin, &u_row);
        d_item.row_mut(neg).scaled_add(-d_margin, &u_row);
    }
    loss / n
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// InfoNCE over matching rows of two views; denominator runs over all rows of
/// the contrastive view (positive included). Returns the mean loss and writes
/// gradients on both row matrices.
pub fn infonce_loss(
    main: &Array2<f64>,
    contrast: &Array2<f64>,
    tau: f64,
    d_main: &mut Array2<f64>,
    d_contrast: &mut Array2<f64>,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    let n = main.nrows();
    if n != contrast.nrows() {
        return Err(Error::Param("contrastive views must hold the same node count".into()));
    }
    if n == 0 {
        return Ok(0.0);
    }
    // cosine matrix and row-wise softmax
    let mut cos = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            cos[[i, j]] = cosine(main.row(i), contrast.row(j));
        }
    }
    let mut loss = 0.0;
    let mut d_cos = Array2::zeros((n, n));
    for i in 0..n {
        let row = cos.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|c| ((c - max) / tau).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += -(exps[i] / z).ln();
        for j in 0..n {
            let soft = exps[j] / z;
            let delta = if i == j { 1.0 } else { 0.0 };
            d_cos[[i, j]] = (soft - delta) / (tau * n as f64);
        }
    }
    // gradients through the cosine
    for i in 0..n {
        let a = main.row(i);
        let na = a.dot(&a).sqrt();
        if na == 0.0 {
            continue;
        }
        for j in 0..n {
            let b = contrast.row(j);
            let nb = b.dot(&b).sqrt();
            if nb == 0.0 {
                continue;
            }
            let g = d_cos[[i, j]];
            if g == 0.0 {
                continue;
            }
            let c = cos[[i, j]];
            // d cos / d a = b/(|a||b|) - cos * a/|a|^2
            let da = &(&b / (na * nb)) - &(&a * (c / (na * na)));
            d_main.row_mut(i).scaled_add(g, &da);
            let db = &(&a / (na * nb)) - &(&b * (c / (nb * nb)));
            d_contrast.row_mut(j).scaled_add(g, &db);
        }
    }
    Ok(loss / n as f64)
}

/// Scalar components of the joint objective.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub infonce_user: f64,
    pub infonce_item: f64,
    /// Squared L2 norm of all recommender parameters (before the theta2 weight).
    pub weight_norm_sq: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub tau: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn reassemble(&self) -> f64 {
        self.bpr + self.theta1 * (self.infonce_user + self.infonce_item) + self.theta2 * self.weight_norm_sq
    }
}

/// Gradients for every trainable recommender tensor.
#[derive(Debug, Clone)]
pub struct JointGrads {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
    pub entity: Array2<f64>,
    pub relation: Array2<f64>,
    pub w: Array2<f64>,
}

impl JointGrads {
    fn zeros(tables: &EmbeddingTables) -> Self {
        Self {
            user: Array2::zeros(tables.user.raw_dim()),
            item: Array2::zeros(tables.item.raw_dim()),
            entity: Array2::zeros(tables.kg.entity_table.raw_dim()),
            relation: Array2::zeros(tables.kg.relation_table.raw_dim()),
            w: Array2::zeros(tables.kg.w.raw_dim()),
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, grad) in [
            ("user", &self.user),
            ("item", &self.item),
            ("entity", &self.entity),
            ("relation", &self.relation),
            ("w", &self.w),
        ] {
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!("gradient of {name} is not finite")));
            }
        }
        Ok(())
    }
}

/// Hyperparameters of one joint forward/backward evaluation.
#[derive(Debug, Clone)]
pub struct JointConfig {
    pub theta1: f64,
    pub theta2: f64,
    pub tau: f64,
    /// User indices contrasted this step.
    pub user_batch: Vec<usize>,
    /// Item indices contrasted this step.
    pub item_batch: Vec<usize>,
}

fn gather(rows: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), rows.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).assign(&rows.row(i));
    }
    out
}

fn scatter_add(target: &mut Array2<f64>, idx: &[usize], rows: &Array2<f64>) {
    for (k, &i) in idx.iter().enumerate() {
        target.row_mut(i).scaled_add(1.0, &rows.row(k));
    }
}

struct ViewForward {
    enh: AggregateForward,
    prop: PropagationForward,
}

fn forward_view(tables: &EmbeddingTables, op: &PropagationOperator, kg: &KnowledgeGraph) -> ViewForward {
    let enh = aggregate_kg(&tables.kg, kg, &tables.item);
    let prop = propagate(op, &tables.user, &enh.output, tables.layers);
    ViewForward { enh, prop }
}

fn backward_view(
    tables: &EmbeddingTables,
    op: &PropagationOperator,
    kg: &KnowledgeGraph,
    view: &ViewForward,
    d_user_final: &Array2<f64>,
    d_item_final: &Array2<f64>,
    grads: &mut JointGrads,
) {
    let (d_user0, d_enh) = propagate_backward(op, &view.prop, d_user_final, d_item_final);
    grads.user += &d_user0;
    let mut kg_grads = KgGrads::zeros(&tables.kg, tables.item.nrows());
    aggregate_kg_backward(&tables.kg, kg, &tables.item, &view.enh, &d_enh, &mut kg_grads);
    grads.entity += &kg_grads.entity_table;
    grads.relation += &kg_grads.relation_table;
    grads.w += &kg_grads.w;
    grads.item += &kg_grads.base_items;
}

/// Full joint objective: BPR on the main view, InfoNCE between views, and L2
/// weight decay, with gradients for every recommender parameter.
///
/// A `None` contrastive KG (or theta1 = 0) disables the contrastive branch
/// entirely; its loss terms and gradients are exactly zero.
pub fn joint_forward_backward(
    tables: &EmbeddingTables,
    op: &PropagationOperator,
    kg_main: &KnowledgeGraph,
    kg_contrast: Option<&KnowledgeGraph>,
    triples: &[(usize, usize, usize)],
    cfg: &JointConfig,
) -> Result<(LossBreakdown, JointGrads)> {
    let mut grads = JointGrads::zeros(tables);
    let main = forward_view(tables, op, kg_main);

    let mut d_user_main = Array2::zeros(main.prop.user_final.raw_dim());
    let mut d_item_main = Array2::zeros(main.prop.item_final.raw_dim());
    let bpr = bpr_loss(
        &main.prop.user_final,
        &main.prop.item_final,
        triples,
        &mut d_user_main,
        &mut d_item_main,
    );

    let mut infonce_user = 0.0;
    let mut infonce_item = 0.0;
    let contrastive = kg_contrast.filter(|_| cfg.theta1 > 0.0);
    let contrast = contrastive.map(|kg| forward_view(tables, op, kg));
    if let (Some(kg), Some(view)) = (contrastive, contrast.as_ref()) {
        let mut d_user_contrast = Array2::zeros(view.prop.user_final.raw_dim());
        let mut d_item_contrast = Array2::zeros(view.prop.item_final.raw_dim());

        let main_u = gather(&main.prop.user_final, &cfg.user_batch);
        let ctr_u = gather(&view.prop.user_final, &cfg.user_batch);
        let mut d_main_u = Array2::zeros(main_u.raw_dim());
        let mut d_ctr_u = Array2::zeros(ctr_u.raw_dim());
        infonce_user = infonce_loss(&main_u, &ctr_u, cfg.tau, &mut d_main_u, &mut d_ctr_u)?;
        d_main_u *= cfg.theta1;
        d_ctr_u *= cfg.theta1;
        scatter_add(&mut d_user_main, &cfg.user_batch, &d_main_u);
        scatter_add(&mut d_user_contrast, &cfg.user_batch, &d_ctr_u);

        let main_v = gather(&main.prop.item_final, &cfg.item_batch);
        let ctr_v = gather(&view.prop.item_final, &cfg.item_batch);
        let mut d_main_v = Array2::zeros(main_v.raw_dim());
        let mut d_ctr_v = Array2::zeros(ctr_v.raw_dim());
        infonce_item = infonce_loss(&main_v, &ctr_v, cfg.tau, &mut d_main_v, &mut d_ctr_v)?;
        d_main_v *= cfg.theta1;
        d_ctr_v *= cfg.theta1;
        scatter_add(&mut d_item_main, &cfg.item_batch, &d_main_v);
        scatter_add(&mut d_item_contrast, &cfg.item_batch, &d_ctr_v);

        backward_view(tables, op, kg, view, &d_user_contrast, &d_item_contrast, &mut grads);
    }

    backward_view(tables, op, kg_main, &main, &d_user_main, &d_item_main, &mut grads);

    // L2 weight decay over all recommender parameters
    let mut weight_norm_sq = 0.0;
    for (param, grad) in [
        (&tables.user, &mut grads.user),
        (&tables.item, &mut grads.item),
        (&tables.kg.entity_table, &mut grads.entity),
        (&tables.kg.relation_table, &mut grads.relation),
        (&tables.kg.w, &mut grads.w),
    ] {
        weight_norm_sq += param.iter().map(|x| x * x).sum::<f64>();
        grad.scaled_add(2.0 * cfg.theta2, param);
    }

    grads.check_finite()?;
    let breakdown = LossBreakdown {
        bpr,
        infonce_user,
        infonce_item,
        weight_norm_sq,
        theta1: cfg.theta1,
        theta2: cfg.theta2,
        tau: cfg.tau,
        total: bpr + cfg.theta1 * (infonce_user + infonce_item) + cfg.theta2 * weight_norm_sq,
    };
    Ok((breakdown, grads))
}
