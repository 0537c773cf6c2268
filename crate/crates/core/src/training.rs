//! Contrastive training of both domains with matching-driven cross-domain guidance.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_bipartite, DomainDataset, DomainId, OverlapMap, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalSplit};
use crate::hypergraph::ClusterAssignment;
use crate::io;
use crate::linalg::{dot, norm};
use crate::matching::{apply_mask, argmax, build_cost, recover_plan, wafi_iterate, GuidanceMask, WafiOptions};
use crate::propagation::{backward, forward, DomainGraphs, DomainModel, ForwardCache, PropagationOutput};
use crate::similarity::SimilarityGraph;

/// Which cross-domain term is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Masked matching plus the guidance loss.
    #[serde(rename = "full")]
    Full,
    /// No cross-domain term.
    #[serde(rename = "O", alias = "o")]
    O,
    /// Guidance loss over declared overlapped pairs only.
    #[serde(rename = "M", alias = "m")]
    M,
    /// Matching without the guidance mask.
    #[serde(rename = "G", alias = "g")]
    G,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::O => "O",
            Ablation::M => "M",
            Ablation::G => "G",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epsilon: f64,
    /// Iteration budget of the per-batch matching solve.
    pub matching_max_iters: usize,
    pub matching_tol: f64,
    pub batch_size: usize,
    pub neg_samples: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Cutoff of the validation hit rate used for model selection.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.6,
            epsilon: 0.01,
            matching_max_iters: 100,
            matching_tol: 1e-10,
            batch_size: 256,
            neg_samples: 10,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 100,
            seed: 0,
            ablation: Ablation::Full,
            eval_k: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.batch_size == 0 || self.neg_samples == 0 || self.eval_k == 0 {
            return bad("batch size, negative samples and k must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("learning rate must be >= 0 and moment decays in [0, 1)".into());
        }
        Ok(())
    }

    /// Whether batches run the cross-domain term at all.
    pub fn guidance_enabled(&self) -> bool {
        self.ablation != Ablation::O && self.lambda > 0.0
    }
}

/// Frozen graphs and per-user item lists of one domain.
#[derive(Debug, Clone)]
pub struct TrainingDomain {
    pub graphs: DomainGraphs,
    pub train: Vec<Vec<usize>>,
    pub validation: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    pub num_items: usize,
}

impl TrainingDomain {
    pub fn new(ds: &DomainDataset, split: &Split, item_graph: &SimilarityGraph, clusters: &ClusterAssignment) -> Result<Self> {
        let graphs = DomainGraphs::new(&build_bipartite(ds, split), item_graph, clusters)?;
        let nu = ds.num_users();
        Ok(TrainingDomain {
            graphs,
            train: split.train_items_by_user(nu),
            validation: split.validation_items_by_user(nu),
            test: split.test_items_by_user(nu),
            num_items: ds.num_items(),
        })
    }

    pub fn num_users(&self) -> usize {
        self.train.len()
    }

    pub fn num_train(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }
}

/// `exp(cos(a, b))`.
pub fn similarity_kernel(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    crate::linalg::cosine(a, b).map(f64::exp).ok_or(Error::DegenerateEmbedding)
}

/// Cosine and its gradients with respect to both arguments.
fn cosine_grad(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<(f64, Vector, Vector)> {
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::DegenerateEmbedding);
    }
    let c = dot(a, b) / (na * nb);
    let ga = (&b / (na * nb)) - &(&a * (c / (na * na)));
    let gb = (&a / (na * nb)) - &(&b * (c / (nb * nb)));
    Ok((c, ga, gb))
}

type Vector = ndarray::Array1<f64>;

/// One contrastive term `−cos(a, p) + log Σ_k exp(cos(a, n_k))`, accumulating gradients.
///
/// `grad_neg` receives `(index, gradient)` for every negative.
fn contrastive_term(
    anchor: ArrayView1<f64>,
    positive: ArrayView1<f64>,
    negatives: &[ArrayView1<f64>],
    grad_anchor: &mut Vector,
    grad_pos: &mut Vector,
    mut grad_neg: impl FnMut(usize, Vector),
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Contract("contrastive term needs at least one negative".into()));
    }
    let (cp, ga, gp) = cosine_grad(anchor, positive)?;
    *grad_anchor -= &ga;
    *grad_pos -= &gp;
    let mut cos = Vec::with_capacity(negatives.len());
    let mut grads = Vec::with_capacity(negatives.len());
    for n in negatives {
        let (c, ga, gn) = cosine_grad(anchor, *n)?;
        cos.push(c);
        grads.push((ga, gn));
    }
    let lse = crate::linalg::log_sum_exp(cos.iter().copied());
    for (k, (c, (ga, gn))) in cos.iter().zip(grads).enumerate() {
        let w = (c - lse).exp();
        grad_anchor.scaled_add(w, &ga);
        grad_neg(k, gn * w);
    }
    Ok(-cp + lse)
}

/// Users, sampled positives and negatives of one domain's batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub users: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Mean over the batch of `−log 𝒮(𝒰_u, 𝒱_p) + log Σ_n 𝒮(𝒰_u, 𝒱_n)`.
pub fn cf_loss(out: &PropagationOutput, batch: &DomainBatch) -> Result<f64> {
    cf_loss_grad(out, batch).map(|(l, _, _)| l)
}

/// [`cf_loss`] with gradients with respect to `𝒰` and `𝒱`.
pub fn cf_loss_grad(out: &PropagationOutput, batch: &DomainBatch) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let mut d_user = Array2::zeros(out.user_emb.dim());
    let mut d_item = Array2::zeros(out.item_emb.dim());
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let dim = out.user_emb.ncols();
    let mut total = 0.0;
    for ((&u, &p), negs) in batch.users.iter().zip(&batch.positives).zip(&batch.negatives) {
        let neg_rows: Vec<_> = negs.iter().map(|&n| out.item_emb.row(n)).collect();
        let mut ga = Vector::zeros(dim);
        let mut gp = Vector::zeros(dim);
        let mut neg_grads = Vec::with_capacity(negs.len());
        total += contrastive_term(out.user_emb.row(u), out.item_emb.row(p), &neg_rows, &mut ga, &mut gp, |k, g| {
            neg_grads.push((negs[k], g))
        })?;
        d_user.row_mut(u).scaled_add(scale, &ga);
        d_item.row_mut(p).scaled_add(scale, &gp);
        for (n, g) in neg_grads {
            d_item.row_mut(n).scaled_add(scale, &g);
        }
    }
    Ok((total * scale, d_user, d_item))
}

/// Sum over both directions of the guidance contrastive loss for every batch user.
///
/// The positive of source `i` is row `i` of `π U_t`; negatives are all target
/// users except the one `π` matches `i` to. Targets mirror this with `πᵀ U_s`.
pub fn guidance_loss(us: ArrayView2<f64>, ut: ArrayView2<f64>, pi: ArrayView2<f64>) -> Result<f64> {
    guidance_loss_grad(us, ut, pi).map(|(l, _, _)| l)
}

pub fn guidance_loss_grad(
    us: ArrayView2<f64>,
    ut: ArrayView2<f64>,
    pi: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let all: Vec<usize> = (0..us.nrows()).collect();
    guidance_terms(us, ut, pi, &all, &all)
}

/// Guidance loss restricted to declared `(source, target)` pairs with `π` their identity coupling.
pub fn pair_guidance_loss_grad(
    us: ArrayView2<f64>,
    ut: ArrayView2<f64>,
    pairs: &[(usize, usize)],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let n = us.nrows();
    let mut pi = Array2::zeros((n, n));
    for &(i, j) in pairs {
        pi[[i, j]] = 1.0;
    }
    let src: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let tgt: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    guidance_terms(us, ut, pi.view(), &src, &tgt)
}

fn guidance_terms(
    us: ArrayView2<f64>,
    ut: ArrayView2<f64>,
    pi: ArrayView2<f64>,
    src_anchors: &[usize],
    tgt_anchors: &[usize],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let n = us.nrows();
    if ut.dim() != us.dim() || pi.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "guidance needs equal square blocks, got {:?}, {:?} and plan {:?}",
            us.dim(),
            ut.dim(),
            pi.dim()
        )));
    }
    let dim = us.ncols();
    let mut d_us = Array2::zeros(us.dim());
    let mut d_ut = Array2::zeros(ut.dim());
    let mut total = 0.0;

    let matched_t = pi.dot(&ut);
    for &i in src_anchors {
        let m = argmax(pi.row(i).iter().copied());
        let negs: Vec<usize> = (0..n).filter(|&k| k != m).collect();
        let rows: Vec<_> = negs.iter().map(|&k| ut.row(k)).collect();
        let mut ga = Vector::zeros(dim);
        let mut gp = Vector::zeros(dim);
        total += contrastive_term(us.row(i), matched_t.row(i), &rows, &mut ga, &mut gp, |k, g| {
            d_ut.row_mut(negs[k]).scaled_add(1.0, &g)
        })?;
        d_us.row_mut(i).scaled_add(1.0, &ga);
        for k in 0..n {
            let w = pi[[i, k]];
            if w != 0.0 {
                d_ut.row_mut(k).scaled_add(w, &gp);
            }
        }
    }

    let matched_s = pi.t().dot(&us);
    for &j in tgt_anchors {
        let m = argmax(pi.column(j).iter().copied());
        let negs: Vec<usize> = (0..n).filter(|&k| k != m).collect();
        let rows: Vec<_> = negs.iter().map(|&k| us.row(k)).collect();
        let mut ga = Vector::zeros(dim);
        let mut gp = Vector::zeros(dim);
        total += contrastive_term(ut.row(j), matched_s.row(j), &rows, &mut ga, &mut gp, |k, g| {
            d_us.row_mut(negs[k]).scaled_add(1.0, &g)
        })?;
        d_ut.row_mut(j).scaled_add(1.0, &ga);
        for k in 0..n {
            let w = pi[[k, j]];
            if w != 0.0 {
                d_us.row_mut(k).scaled_add(w, &gp);
            }
        }
    }
    Ok((total, d_us, d_ut))
}

/// `L = L_R^S + L_R^T + λ L_C`.
pub fn total_loss(l_rs: f64, l_rt: f64, l_c: f64, lambda: f64) -> f64 {
    l_rs + l_rt + lambda * l_c
}

/// Adaptive-moment optimizer over the trainable tensors of one model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &DomainModel, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut DomainModel, grad: &DomainModel) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let trainable: Vec<bool> = (0..self.m.len()).map(|i| model.is_trainable(i)).collect();
        let grads = grad.tensors();
        for (idx, param) in model.tensors_mut().into_iter().enumerate() {
            if !trainable[idx] {
                continue;
            }
            let g = grads[idx].1;
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for k in 0..param.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                param[k] -= self.lr * update;
            }
        }
    }
}

/// Cross-domain term of one batch, decided before the gradient step.
#[derive(Debug, Clone, PartialEq)]
pub enum Guidance {
    None,
    /// Soft plan between batch positions (held constant).
    Plan(Array2<f64>),
    /// Declared in-batch overlapped positions.
    Pairs(Vec<(usize, usize)>),
}

/// Source and target halves of one joint step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source: DomainBatch,
    pub target: DomainBatch,
    /// In-batch overlapped pairs as `(source position, target position)`.
    pub overlap: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub rs: f64,
    pub rt: f64,
    pub c: f64,
    pub total: f64,
}

fn gather_rows(x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(ndarray::Axis(0), rows)
}

fn scatter_rows(target: &mut Array2<f64>, rows: &[usize], src: ArrayView2<f64>, scale: f64) {
    for (&r, s) in rows.iter().zip(src.rows()) {
        target.row_mut(r).scaled_add(scale, &s);
    }
}

/// Loss and gradients of one joint batch given forward outputs and a fixed guidance term.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective(
    models: [&DomainModel; 2],
    domains: [&TrainingDomain; 2],
    outs: [&PropagationOutput; 2],
    caches: [&ForwardCache; 2],
    batch: &Batch,
    guidance: &Guidance,
    lambda: f64,
) -> Result<(LossParts, [DomainModel; 2])> {
    let (rs, mut du_s, dv_s) = cf_loss_grad(outs[0], &batch.source)?;
    let (rt, mut du_t, dv_t) = cf_loss_grad(outs[1], &batch.target)?;
    let mut c = 0.0;
    let cross = match guidance {
        Guidance::None => None,
        Guidance::Plan(pi) => {
            let us = gather_rows(outs[0].user_emb.view(), &batch.source.users);
            let ut = gather_rows(outs[1].user_emb.view(), &batch.target.users);
            Some(guidance_loss_grad(us.view(), ut.view(), pi.view())?)
        }
        Guidance::Pairs(pairs) if pairs.is_empty() => None,
        Guidance::Pairs(pairs) => {
            let us = gather_rows(outs[0].user_emb.view(), &batch.source.users);
            let ut = gather_rows(outs[1].user_emb.view(), &batch.target.users);
            Some(pair_guidance_loss_grad(us.view(), ut.view(), pairs)?)
        }
    };
    if let Some((l, gs, gt)) = cross {
        c = l;
        scatter_rows(&mut du_s, &batch.source.users, gs.view(), lambda);
        scatter_rows(&mut du_t, &batch.target.users, gt.view(), lambda);
    }
    let gs = backward(models[0], &domains[0].graphs, outs[0], caches[0], du_s.view(), dv_s.view());
    let gt = backward(models[1], &domains[1].graphs, outs[1], caches[1], du_t.view(), dv_t.view());
    let parts = LossParts {
        rs,
        rt,
        c,
        total: total_loss(rs, rt, c, lambda),
    };
    Ok((parts, [gs, gt]))
}

/// Loss and gradient of one domain's collaborative-filtering term.
pub fn domain_objective(model: &DomainModel, domain: &TrainingDomain, batch: &DomainBatch) -> Result<(f64, DomainModel)> {
    let (out, cache) = forward(model, &domain.graphs)?;
    let (l, du, dv) = cf_loss_grad(&out, batch)?;
    Ok((l, backward(model, &domain.graphs, &out, &cache, du.view(), dv.view())))
}

/// Report of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    /// `(tensor, coordinate)` of the worst probe.
    pub worst: (usize, usize),
}

/// Central differences with step `h` on up to `probes_per_tensor` random coordinates of every tensor.
///
/// Relative error is `|g_analytic − g_fd| / max(1, |g_fd|)`.
pub fn gradient_check(
    mut loss: impl FnMut(&[Vec<f64>]) -> f64,
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    probes_per_tensor: usize,
    h: f64,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        probes: 0,
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    for t in 0..params.len() {
        let len = params[t].len();
        let coords: Vec<usize> = if probes_per_tensor >= len {
            (0..len).collect()
        } else {
            index::sample(rng, len, probes_per_tensor).into_vec()
        };
        for c in coords {
            let orig = work[t][c];
            work[t][c] = orig + h;
            let up = loss(&work);
            work[t][c] = orig - h;
            let down = loss(&work);
            work[t][c] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (analytic[t][c] - fd).abs() / fd.abs().max(1.0);
            report.probes += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (t, c);
            }
        }
    }
    report
}

/// Flattens a model's trainable tensors.
pub fn flatten_trainable(model: &DomainModel) -> Vec<Vec<f64>> {
    model
        .tensors()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| model.is_trainable(*i))
        .map(|(_, (_, t))| t.to_vec())
        .collect()
}

/// Writes flattened trainable tensors back into `model`.
pub fn unflatten_trainable(model: &mut DomainModel, flat: &[Vec<f64>]) {
    let trainable: Vec<bool> = (0..model.tensors().len()).map(|i| model.is_trainable(i)).collect();
    let mut src = flat.iter();
    for (i, t) in model.tensors_mut().into_iter().enumerate() {
        if trainable[i] {
            t.copy_from_slice(src.next().expect("tensor count matches"));
        }
    }
}

/// Independent random stream for one purpose of a run.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_SOURCE: u64 = 0;
const STREAM_TARGET: u64 = 1;
const STREAM_JOINT: u64 = 2;
const STREAM_INIT_SOURCE: u64 = 3;
const STREAM_INIT_TARGET: u64 = 4;

fn domain_stream_id(d: DomainId) -> u64 {
    match d {
        DomainId::Source => STREAM_SOURCE,
        DomainId::Target => STREAM_TARGET,
    }
}

/// Model initialized from the run seed's stream for `domain`.
pub fn init_model(domain: DomainId, num_users: usize, num_items: usize, dim: usize, layers: usize, init_std: f64, seed: u64) -> Result<DomainModel> {
    let id = match domain {
        DomainId::Source => STREAM_INIT_SOURCE,
        DomainId::Target => STREAM_INIT_TARGET,
    };
    DomainModel::new(num_users, num_items, dim, layers, init_std, &mut stream(seed, id))
}

/// Draws a positive and `neg` non-interacted items for each user.
fn sample_items(domain: &TrainingDomain, users: Vec<usize>, neg: usize, rng: &mut ChaCha8Rng) -> Result<DomainBatch> {
    let mut positives = Vec::with_capacity(users.len());
    let mut negatives = Vec::with_capacity(users.len());
    for &u in &users {
        let items = &domain.train[u];
        if items.is_empty() {
            return Err(Error::Contract(format!("user {u} has no training interactions")));
        }
        if items.len() >= domain.num_items {
            return Err(Error::Contract(format!("user {u} interacted with every item; no negatives")));
        }
        positives.push(items[rng.random_range(0..items.len())]);
        let mut negs = Vec::with_capacity(neg);
        while negs.len() < neg {
            let cand = rng.random_range(0..domain.num_items);
            if items.binary_search(&cand).is_err() {
                negs.push(cand);
            }
        }
        negatives.push(negs);
    }
    Ok(DomainBatch {
        users,
        positives,
        negatives,
    })
}

/// Users with at least one training interaction.
fn trainable_users(domain: &TrainingDomain) -> Vec<usize> {
    (0..domain.num_users()).filter(|&u| !domain.train[u].is_empty()).collect()
}

fn sample_domain_batch(domain: &TrainingDomain, pool: &[usize], size: usize, neg: usize, rng: &mut ChaCha8Rng) -> Result<DomainBatch> {
    let size = size.min(pool.len());
    let picks = index::sample(rng, pool.len(), size);
    let users = picks.into_iter().map(|k| pool[k]).collect();
    sample_items(domain, users, neg, rng)
}

/// Joint batch: `⌊K_u·N⌋` aligned overlapped pairs first, then random users per domain.
fn sample_joint_batch(
    domains: [&TrainingDomain; 2],
    pools: [&[usize]; 2],
    overlap: &[(usize, usize)],
    ratio: f64,
    cfg: &TrainConfig,
    rngs: &mut [ChaCha8Rng; 3],
) -> Result<Batch> {
    let n = cfg.batch_size.min(pools[0].len()).min(pools[1].len());
    let forced = ((ratio * n as f64).floor() as usize).min(overlap.len());
    let chosen: Vec<(usize, usize)> = index::sample(&mut rngs[2], overlap.len(), forced)
        .into_iter()
        .map(|k| overlap[k])
        .collect();
    let mut halves = Vec::with_capacity(2);
    for side in 0..2 {
        let taken: Vec<usize> = chosen.iter().map(|p| if side == 0 { p.0 } else { p.1 }).collect();
        let rest: Vec<usize> = pools[side].iter().copied().filter(|u| !taken.contains(u)).collect();
        let fill = index::sample(&mut rngs[side], rest.len(), n - forced);
        let users: Vec<usize> = taken.into_iter().chain(fill.into_iter().map(|k| rest[k])).collect();
        halves.push(sample_items(domains[side], users, cfg.neg_samples, &mut rngs[side])?);
    }
    let target = halves.pop().expect("two halves");
    let source = halves.pop().expect("two halves");
    let partner: HashMap<usize, usize> = overlap.iter().copied().collect();
    let position: HashMap<usize, usize> = target.users.iter().enumerate().map(|(q, &u)| (u, q)).collect();
    let pairs = source
        .users
        .iter()
        .enumerate()
        .filter_map(|(p, u)| partner.get(u).and_then(|t| position.get(t)).map(|&q| (p, q)))
        .collect();
    Ok(Batch {
        source,
        target,
        overlap: pairs,
    })
}

/// Per-epoch record of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_rs: f64,
    pub loss_rt: f64,
    pub loss_c: f64,
    pub hr_val_s: f64,
    pub hr_val_t: f64,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation snapshots of the source and target models.
    pub models: [DomainModel; 2],
    /// Epoch of each snapshot (0 when no epochs ran).
    pub best_epochs: [usize; 2],
    pub trace: Vec<EpochRecord>,
    /// Number of batches that executed the cross-domain term.
    pub guidance_executions: usize,
    /// Matching solves that hit their iteration budget before meeting the tolerance.
    pub unconverged_matchings: usize,
}

/// Writes `epoch,loss_total,loss_rs,loss_rt,loss_c,hr10_val_s,hr10_val_t`.
pub fn write_trace(path: &Path, trace: &[EpochRecord], k: usize) -> Result<()> {
    io::write_atomic(path, trace_csv(trace, k).as_bytes())
}

pub fn trace_csv(trace: &[EpochRecord], k: usize) -> String {
    let mut out = format!("epoch,loss_total,loss_rs,loss_rt,loss_c,hr{k}_val_s,hr{k}_val_t\n");
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.loss_total, r.loss_rs, r.loss_rt, r.loss_c, r.hr_val_s, r.hr_val_t
        )
        .unwrap();
    }
    out
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, step })
    }
}

fn steps_for(interactions: usize, batch: usize) -> usize {
    interactions.div_ceil(batch).max(1)
}

struct Selection {
    best: DomainModel,
    best_hr: f64,
    best_epoch: usize,
}

impl Selection {
    fn new(model: &DomainModel) -> Self {
        Selection {
            best: model.clone(),
            best_hr: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }

    fn offer(&mut self, model: &DomainModel, domain: &TrainingDomain, epoch: usize, k: usize) -> Result<f64> {
        let hr = validation_hr(model, domain, k)?;
        if hr > self.best_hr {
            self.best_hr = hr;
            self.best_epoch = epoch;
            self.best = model.clone();
        }
        Ok(hr)
    }
}

fn validation_hr(model: &DomainModel, domain: &TrainingDomain, k: usize) -> Result<f64> {
    let out = crate::propagation::propagate(model, &domain.graphs)?;
    Ok(evaluate(&out, domain, EvalSplit::Validation, k)?.hr)
}

/// Runs one epoch of a single domain without any cross-domain term; returns the mean loss.
fn isolated_epoch(
    model: &mut DomainModel,
    adam: &mut Adam,
    domain: &TrainingDomain,
    pool: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let steps = steps_for(domain.num_train(), cfg.batch_size);
    let mut sum = 0.0;
    for step in 0..steps {
        let batch = sample_domain_batch(domain, pool, cfg.batch_size, cfg.neg_samples, rng)?;
        let (l, grad) = domain_objective(model, domain, &batch)?;
        check_finite(l, epoch, step)?;
        adam.step(model, &grad);
        sum += l;
    }
    Ok(sum / steps as f64)
}

/// Trains one domain alone with the same random streams [`train`] uses when guidance is off.
pub fn train_isolated(mut model: DomainModel, domain: &TrainingDomain, which: DomainId, cfg: &TrainConfig) -> Result<(DomainModel, usize, Vec<(f64, f64)>)> {
    cfg.validate()?;
    model.validate()?;
    let mut rng = stream(cfg.seed, domain_stream_id(which));
    let mut adam = Adam::new(&model, cfg.learning_rate, cfg.beta1, cfg.beta2);
    let pool = trainable_users(domain);
    let mut sel = Selection::new(&model);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let l = isolated_epoch(&mut model, &mut adam, domain, &pool, cfg, &mut rng, epoch)?;
        let hr = sel.offer(&model, domain, epoch, cfg.eval_k)?;
        trace.push((l, hr));
    }
    Ok((sel.best, sel.best_epoch, trace))
}

/// Builds the guidance term of one batch from the current user embeddings.
fn plan_guidance(
    outs: [&PropagationOutput; 2],
    batch: &Batch,
    cfg: &TrainConfig,
    unconverged: &mut usize,
) -> Result<Guidance> {
    if cfg.ablation == Ablation::M {
        return Ok(Guidance::Pairs(batch.overlap.clone()));
    }
    let us = gather_rows(outs[0].user_emb.view(), &batch.source.users);
    let ut = gather_rows(outs[1].user_emb.view(), &batch.target.users);
    let cost = build_cost(us.view(), ut.view())?;
    let mask = match cfg.ablation {
        Ablation::Full => GuidanceMask::new(cost.nrows(), &batch.overlap)?,
        _ => GuidanceMask::unmasked(cost.nrows()),
    };
    let q = apply_mask(cost.view(), &mask)?;
    let opts = WafiOptions {
        epsilon: cfg.epsilon,
        max_iters: cfg.matching_max_iters,
        tol: cfg.matching_tol,
    };
    let pot = wafi_iterate(q.view(), &opts)?;
    if !pot.converged {
        *unconverged += 1;
    }
    Ok(Guidance::Plan(recover_plan(q.view(), &pot).pi))
}

/// Trains both domains; returns best-validation snapshots and the per-epoch trace.
pub fn train(
    models: [DomainModel; 2],
    domains: [&TrainingDomain; 2],
    overlap: &OverlapMap,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for (m, d) in models.iter().zip(domains) {
        m.validate()?;
        if m.num_users() != d.num_users() || m.num_items() != d.num_items {
            return Err(Error::ShapeMismatch("model does not fit its domain".into()));
        }
    }
    overlap.validate()?;
    let [mut ms, mut mt] = models;
    let mut rngs = [
        stream(cfg.seed, STREAM_SOURCE),
        stream(cfg.seed, STREAM_TARGET),
        stream(cfg.seed, STREAM_JOINT),
    ];
    let mut adam_s = Adam::new(&ms, cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut adam_t = Adam::new(&mt, cfg.learning_rate, cfg.beta1, cfg.beta2);
    let pools = [trainable_users(domains[0]), trainable_users(domains[1])];
    let usable: Vec<(usize, usize)> = overlap
        .pairs
        .iter()
        .copied()
        .filter(|&(s, t)| !domains[0].train[s].is_empty() && !domains[1].train[t].is_empty())
        .collect();
    let mut sel_s = Selection::new(&ms);
    let mut sel_t = Selection::new(&mt);
    let mut outcome_trace = Vec::with_capacity(cfg.epochs);
    let mut guidance_executions = 0;
    let mut unconverged = 0;
    let joint_steps = steps_for(domains[0].num_train().max(domains[1].num_train()), cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        let (mut rs, mut rt, mut c) = (0.0, 0.0, 0.0);
        if cfg.guidance_enabled() {
            for step in 0..joint_steps {
                let batch = sample_joint_batch(domains, [&pools[0], &pools[1]], &usable, overlap.ratio, cfg, &mut rngs)?;
                let (out_s, cache_s) = forward(&ms, &domains[0].graphs)?;
                let (out_t, cache_t) = forward(&mt, &domains[1].graphs)?;
                let guidance = plan_guidance([&out_s, &out_t], &batch, cfg, &mut unconverged)?;
                guidance_executions += 1;
                let (parts, [gs, gt]) = joint_objective(
                    [&ms, &mt],
                    domains,
                    [&out_s, &out_t],
                    [&cache_s, &cache_t],
                    &batch,
                    &guidance,
                    cfg.lambda,
                )?;
                check_finite(parts.total, epoch, step)?;
                adam_s.step(&mut ms, &gs);
                adam_t.step(&mut mt, &gt);
                rs += parts.rs;
                rt += parts.rt;
                c += parts.c;
            }
            let s = joint_steps as f64;
            (rs, rt, c) = (rs / s, rt / s, c / s);
        } else {
            let [r0, r1, _] = &mut rngs;
            rs = isolated_epoch(&mut ms, &mut adam_s, domains[0], &pools[0], cfg, r0, epoch)?;
            rt = isolated_epoch(&mut mt, &mut adam_t, domains[1], &pools[1], cfg, r1, epoch)?;
        }
        let hr_s = sel_s.offer(&ms, domains[0], epoch, cfg.eval_k)?;
        let hr_t = sel_t.offer(&mt, domains[1], epoch, cfg.eval_k)?;
        outcome_trace.push(EpochRecord {
            epoch,
            loss_total: total_loss(rs, rt, c, cfg.lambda),
            loss_rs: rs,
            loss_rt: rt,
            loss_c: c,
            hr_val_s: hr_s,
            hr_val_t: hr_t,
        });
    }
    Ok(TrainOutcome {
        best_epochs: [sel_s.best_epoch, sel_t.best_epoch],
        models: [sel_s.best, sel_t.best],
        trace: outcome_trace,
        guidance_executions,
        unconverged_matchings: unconverged,
    })
}
