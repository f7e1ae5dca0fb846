//! Query-conditioned attention over edge questions, its supervised
//! contrastive objective, exact gradients, training and reranking.
//!
//! For a query `h_q` and a node with question embeddings `e_1..e_M`:
//!
//! ```text
//! a   = softmax_j( (h_q W_Q) · (e_j W_K) / sqrt(d) )
//! h_a = h_v + Σ_j a_j (e_j W_V)
//! s   = h_q · h_a
//! ```
//!
//! With no questions `h_a = h_v`. Training minimizes, per query,
//! `logsumexp_y(s_y) - mean_{x in P} s_x` over the query's candidates, which
//! is the softmax cross-entropy of the positives averaged over positives.
//!
//! Gradients, with `g_y = softmax(s)_y - [y in P] / |P|`,
//! `u_j = h_q · (e_j W_V)`, `ū = Σ a_j u_j`, `δ_j = a_j (u_j - ū)`:
//!
//! ```text
//! dL/dW_V = Σ_y g_y (Σ_j a_j e_j) ⊗ h_q
//! dL/dW_Q = Σ_y g_y h_q ⊗ (Σ_j δ_j k_j) / sqrt(d)
//! dL/dW_K = Σ_y g_y (Σ_j δ_j e_j) ⊗ q / sqrt(d)
//! ```
//!
//! where `q = h_q W_Q` and `k_j = e_j W_K`.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, log_sum_exp, softmax, Matrix};
use crate::retrieval::{EmbeddingVector, GraphEmbeddings};

/// Candidates reranked after first-stage retrieval.
pub const DEFAULT_TOP_N: usize = 50;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid training batch: {0}")]
    InvalidBatch(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (lr {learning_rate})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
        learning_rate: f64,
    },
}

/// Projection matrices of the attention head. `W_Q` and `W_K` map the
/// embedding space to `d` dimensions; `W_V` maps back into the embedding
/// space so the attended value can be added to the node embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub d: usize,
    pub seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl FusionParams {
    /// Entries drawn uniformly from `[-1, 1) / sqrt(embed_dim)`.
    pub fn init(embed_dim: usize, d: usize, seed: u64) -> Self {
        assert!(embed_dim >= 1 && d >= 1, "dimensions must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / libm::sqrt(embed_dim as f64);
        let mut draw = |rows, cols| Matrix::from_fn(rows, cols, |_, _| (2.0 * uniform(&mut rng) - 1.0) * scale);
        let w_q = draw(embed_dim, d);
        let w_k = draw(embed_dim, d);
        let w_v = draw(embed_dim, embed_dim);
        FusionParams { w_q, w_k, w_v, d, seed }
    }

    pub fn zeros(embed_dim: usize, d: usize) -> Self {
        FusionParams {
            w_q: Matrix::zeros(embed_dim, d),
            w_k: Matrix::zeros(embed_dim, d),
            w_v: Matrix::zeros(embed_dim, embed_dim),
            d,
            seed: 0,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_q.rows
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let e = self.embed_dim();
        let shapes = [
            (self.w_q.rows, self.w_q.cols, e, self.d),
            (self.w_k.rows, self.w_k.cols, e, self.d),
            (self.w_v.rows, self.w_v.cols, e, e),
        ];
        for (r, c, er, ec) in shapes {
            if r != er {
                return Err(FusionError::DimensionMismatch { expected: er, found: r });
            }
            if c != ec {
                return Err(FusionError::DimensionMismatch { expected: ec, found: c });
            }
        }
        if self.d == 0 {
            return Err(FusionError::InvalidConfig("projection dimension must be >= 1".into()));
        }
        if !(self.w_q.is_finite() && self.w_k.is_finite() && self.w_v.is_finite()) {
            return Err(FusionError::InvalidConfig(
                "parameters contain non-finite entries".into(),
            ));
        }
        Ok(())
    }
}

/// A node embedding and the embeddings of the questions around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionInstance {
    pub node: EmbeddingVector,
    pub questions: Vec<EmbeddingVector>,
}

impl FusionInstance {
    /// Node plus its outgoing and incoming questions.
    pub fn from_graph(embeddings: &GraphEmbeddings, node: usize) -> Self {
        FusionInstance {
            node: embeddings.nodes[node].clone(),
            questions: embeddings.neighbourhood_vectors(node),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub augmented: Vec<f64>,
    pub attention: Vec<f64>,
}

/// Forward pass of one candidate with everything the backward pass needs.
struct Forward {
    augmented: Vec<f64>,
    attention: Vec<f64>,
    keys: Vec<Vec<f64>>,
    value_dots: Vec<f64>,
}

fn check_dim(expected: usize, found: usize) -> Result<(), FusionError> {
    if expected == found {
        Ok(())
    } else {
        Err(FusionError::DimensionMismatch { expected, found })
    }
}

fn forward(
    query: &[f64],
    query_proj: &[f64],
    instance: &FusionInstance,
    params: &FusionParams,
) -> Result<Forward, FusionError> {
    let e = params.embed_dim();
    check_dim(e, instance.node.dim())?;
    let mut augmented = instance.node.as_slice().to_vec();
    if instance.questions.is_empty() {
        return Ok(Forward {
            augmented,
            attention: Vec::new(),
            keys: Vec::new(),
            value_dots: Vec::new(),
        });
    }
    let inv_sqrt_d = 1.0 / libm::sqrt(params.d as f64);
    let mut keys = Vec::with_capacity(instance.questions.len());
    let mut logits = Vec::with_capacity(instance.questions.len());
    for q in &instance.questions {
        check_dim(e, q.dim())?;
        let k = params.w_k.left_mul(q.as_slice());
        logits.push(dot(query_proj, &k) * inv_sqrt_d);
        keys.push(k);
    }
    let attention = softmax(&logits);
    let mut value_dots = Vec::with_capacity(instance.questions.len());
    for (q, &a) in instance.questions.iter().zip(&attention) {
        let v = params.w_v.left_mul(q.as_slice());
        value_dots.push(dot(query, &v));
        for (h, vi) in augmented.iter_mut().zip(&v) {
            *h += a * vi;
        }
    }
    Ok(Forward {
        augmented,
        attention,
        keys,
        value_dots,
    })
}

/// Augmented node embedding for `query`.
pub fn fuse(query: &EmbeddingVector, instance: &FusionInstance, params: &FusionParams) -> Result<Fused, FusionError> {
    check_dim(params.embed_dim(), query.dim())?;
    let query_proj = params.w_q.left_mul(query.as_slice());
    let f = forward(query.as_slice(), &query_proj, instance, params)?;
    Ok(Fused {
        augmented: f.augmented,
        attention: f.attention,
    })
}

/// One query, its candidates and the indices of the positive candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub query: EmbeddingVector,
    pub candidates: Vec<FusionInstance>,
    pub positives: BTreeSet<usize>,
}

impl TrainingBatch {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.positives.is_empty() {
            return Err(FusionError::InvalidBatch("no positives".into()));
        }
        if let Some(&p) = self.positives.iter().next_back() {
            if p >= self.candidates.len() {
                return Err(FusionError::InvalidBatch(alloc::format!(
                    "positive index {p} out of {} candidates",
                    self.candidates.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl Gradients {
    fn zeros_like(params: &FusionParams) -> Self {
        Gradients {
            loss: 0.0,
            w_q: Matrix::zeros(params.w_q.rows, params.w_q.cols),
            w_k: Matrix::zeros(params.w_k.rows, params.w_k.cols),
            w_v: Matrix::zeros(params.w_v.rows, params.w_v.cols),
        }
    }
}

/// Projected query, candidate similarities and forward passes.
type Similarities = (Vec<f64>, Vec<f64>, Vec<Forward>);

fn similarities(batch: &TrainingBatch, params: &FusionParams) -> Result<Similarities, FusionError> {
    batch.validate()?;
    check_dim(params.embed_dim(), batch.query.dim())?;
    let query = batch.query.as_slice();
    let query_proj = params.w_q.left_mul(query);
    let forwards = batch
        .candidates
        .iter()
        .map(|c| forward(query, &query_proj, c, params))
        .collect::<Result<Vec<_>, _>>()?;
    let sims = forwards.iter().map(|f| dot(query, &f.augmented)).collect();
    Ok((query_proj, sims, forwards))
}

fn loss_from_sims(sims: &[f64], positives: &BTreeSet<usize>) -> f64 {
    let lse = log_sum_exp(sims);
    let pos_mean = positives.iter().map(|&p| sims[p]).sum::<f64>() / positives.len() as f64;
    lse - pos_mean
}

/// Contrastive loss of one query against its candidates.
pub fn contrastive_loss(batch: &TrainingBatch, params: &FusionParams) -> Result<f64, FusionError> {
    let (_, sims, _) = similarities(batch, params)?;
    Ok(loss_from_sims(&sims, &batch.positives))
}

/// Mean contrastive loss over several queries.
pub fn mean_loss(batches: &[TrainingBatch], params: &FusionParams) -> Result<f64, FusionError> {
    if batches.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    let mut total = 0.0;
    for b in batches {
        total += contrastive_loss(b, params)?;
    }
    Ok(total / batches.len() as f64)
}

/// Loss and exact gradients of one query's contrastive loss.
pub fn gradients(batch: &TrainingBatch, params: &FusionParams) -> Result<Gradients, FusionError> {
    let (query_proj, sims, forwards) = similarities(batch, params)?;
    let mut grads = Gradients::zeros_like(params);
    grads.loss = loss_from_sims(&sims, &batch.positives);
    let probs = softmax(&sims);
    let pos_weight = 1.0 / batch.positives.len() as f64;
    let query = batch.query.as_slice();
    let inv_sqrt_d = 1.0 / libm::sqrt(params.d as f64);
    let e = params.embed_dim();
    for (y, (cand, fwd)) in batch.candidates.iter().zip(&forwards).enumerate() {
        let g = probs[y] - if batch.positives.contains(&y) { pos_weight } else { 0.0 };
        if g == 0.0 || cand.questions.is_empty() {
            continue;
        }
        let mean_dot: f64 = fwd.attention.iter().zip(&fwd.value_dots).map(|(a, u)| a * u).sum();
        let mut attended = vec![0.0; e];
        let mut delta_questions = vec![0.0; e];
        let mut delta_keys = vec![0.0; params.d];
        for (j, q) in cand.questions.iter().enumerate() {
            let a = fwd.attention[j];
            let delta = a * (fwd.value_dots[j] - mean_dot);
            for ((at, dq), x) in attended.iter_mut().zip(delta_questions.iter_mut()).zip(q.as_slice()) {
                *at += a * x;
                *dq += delta * x;
            }
            for (dk, k) in delta_keys.iter_mut().zip(&fwd.keys[j]) {
                *dk += delta * k;
            }
        }
        grads.w_v.add_outer(g, &attended, query);
        grads.w_q.add_outer(g * inv_sqrt_d, query, &delta_keys);
        grads.w_k.add_outer(g * inv_sqrt_d, &delta_questions, &query_proj);
    }
    Ok(grads)
}

/// Mean loss and mean gradients over several queries.
pub fn batch_gradients(batches: &[&TrainingBatch], params: &FusionParams) -> Result<Gradients, FusionError> {
    if batches.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    let mut total = Gradients::zeros_like(params);
    for b in batches {
        let g = gradients(b, params)?;
        total.loss += g.loss;
        total.w_q.axpy(1.0, &g.w_q);
        total.w_k.axpy(1.0, &g.w_k);
        total.w_v.axpy(1.0, &g.w_v);
    }
    let inv = 1.0 / batches.len() as f64;
    total.loss *= inv;
    total.w_q.scale(inv);
    total.w_k.scale(inv);
    total.w_v.scale(inv);
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub queries_per_batch: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    /// Projection dimension; the embedding dimension when absent.
    #[serde(default)]
    pub projection_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            queries_per_batch: 20,
            learning_rate: 2e-5,
            warmup_ratio: 5e-2,
            seed: 0,
            projection_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.queries_per_batch == 0 {
            return Err(FusionError::InvalidConfig("queries_per_batch must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(FusionError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(FusionError::InvalidConfig("warmup_ratio must be in [0, 1)".into()));
        }
        if self.projection_dim == Some(0) {
            return Err(FusionError::InvalidConfig("projection_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup then cosine decay to zero. `step` counts from 0.
pub fn learning_rate_at(step: usize, total_steps: usize, warmup_steps: usize, base: f64) -> f64 {
    if step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    let decay_steps = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / decay_steps as f64;
    base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress.min(1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub learning_rate: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: FusionParams,
    pub loss_curve: Vec<LossPoint>,
}

/// Mini-batch gradient descent over queries with a warmup + cosine schedule.
/// Deterministic for a given seed.
pub fn train(dataset: &[TrainingBatch], config: &TrainConfig) -> Result<TrainOutcome, FusionError> {
    config.validate()?;
    let first = dataset.first().ok_or(FusionError::EmptyDataset)?;
    let embed_dim = first.query.dim();
    for b in dataset {
        b.validate()?;
        check_dim(embed_dim, b.query.dim())?;
    }
    let d = config.projection_dim.unwrap_or(embed_dim);
    let mut params = FusionParams::init(embed_dim, d, config.seed);
    let steps_per_epoch = dataset.len().div_ceil(config.queries_per_batch);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup_steps = libm::ceil(config.warmup_ratio * total_steps as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        for chunk in order.chunks(config.queries_per_batch) {
            let batch: Vec<&TrainingBatch> = chunk.iter().map(|&i| &dataset[i]).collect();
            let grads = batch_gradients(&batch, &params)?;
            let lr = learning_rate_at(step, total_steps, warmup_steps, config.learning_rate);
            if !grads.loss.is_finite() {
                return Err(FusionError::NonFiniteLoss {
                    epoch,
                    step,
                    loss: grads.loss,
                    learning_rate: lr,
                });
            }
            params.w_q.axpy(-lr, &grads.w_q);
            params.w_k.axpy(-lr, &grads.w_k);
            params.w_v.axpy(-lr, &grads.w_v);
            loss_curve.push(LossPoint {
                epoch,
                step,
                learning_rate: lr,
                loss: grads.loss,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { params, loss_curve })
}

/// Reorder the first `top_n` entries of a first-stage ranking by
/// `h_q · h_a`; the rest keep their order behind them. Reranked entries carry
/// their fused score; ties keep first-stage order.
pub fn rerank(
    query: &EmbeddingVector,
    baseline: &[usize],
    instance: impl Fn(usize) -> FusionInstance,
    params: &FusionParams,
    top_n: usize,
) -> Result<Vec<(usize, Option<f64>)>, FusionError> {
    check_dim(params.embed_dim(), query.dim())?;
    let q = query.as_slice();
    let query_proj = params.w_q.left_mul(q);
    let head = top_n.min(baseline.len());
    let mut scored = Vec::with_capacity(head);
    for (pos, &id) in baseline[..head].iter().enumerate() {
        let f = forward(q, &query_proj, &instance(id), params)?;
        scored.push((pos, id, dot(q, &f.augmented)));
    }
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let mut out: Vec<(usize, Option<f64>)> = scored.into_iter().map(|(_, id, s)| (id, Some(s))).collect();
    out.extend(baseline[head..].iter().map(|&id| (id, None)));
    Ok(out)
}

/// [`rerank`] over graph nodes, using each node's outgoing and incoming
/// questions.
pub fn rerank_nodes(
    query: &EmbeddingVector,
    baseline: &[usize],
    embeddings: &GraphEmbeddings,
    params: &FusionParams,
    top_n: usize,
) -> Result<Vec<(usize, Option<f64>)>, FusionError> {
    rerank(
        query,
        baseline,
        |id| FusionInstance::from_graph(embeddings, id),
        params,
        top_n,
    )
}
