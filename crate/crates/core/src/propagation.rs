//! Graph, item-graph and hypergraph propagation plus adaptive fusion of the item views.
//!
//! Forward passes keep what the backward pass needs; gradients are written by
//! hand and checked against finite differences in the training module.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::BipartiteGraph;
use crate::error::{Error, Result};
use crate::hypergraph::ClusterAssignment;
use crate::linalg::CsrMatrix;
use crate::similarity::SimilarityGraph;

/// Learnable state of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainModel {
    pub user_table: Array2<f64>,
    pub item_table: Array2<f64>,
    /// One `D × D` map per hypergraph layer.
    pub hyper_weights: Vec<Array2<f64>>,
    pub attn_u: Array1<f64>,
    pub attn_v: Array1<f64>,
    /// Scores the item-graph view `v̂`.
    pub attn_vhat: Array1<f64>,
    /// Scores the hypergraph view `ṽ`.
    pub attn_vtilde: Array1<f64>,
    pub train_hyper_weights: bool,
}

impl DomainModel {
    /// Gaussian tables with standard deviation `init_std`, identity layer maps and zero attention.
    pub fn new(
        num_users: usize,
        num_items: usize,
        dim: usize,
        layers: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("embedding dimension must be positive".into()));
        }
        let normal = Normal::new(0.0, init_std)
            .map_err(|e| Error::InvalidParameter(format!("init std {init_std}: {e}")))?;
        let user_table = Array2::from_shape_simple_fn((num_users, dim), || normal.sample(rng));
        let item_table = Array2::from_shape_simple_fn((num_items, dim), || normal.sample(rng));
        Ok(DomainModel {
            user_table,
            item_table,
            hyper_weights: vec![Array2::eye(dim); layers],
            attn_u: Array1::zeros(dim),
            attn_v: Array1::zeros(dim),
            attn_vhat: Array1::zeros(dim),
            attn_vtilde: Array1::zeros(dim),
            train_hyper_weights: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.user_table.ncols()
    }

    pub fn layers(&self) -> usize {
        self.hyper_weights.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_table.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_table.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.item_table.ncols() != d {
            return Err(Error::ShapeMismatch("user and item tables disagree on dimension".into()));
        }
        if self.hyper_weights.iter().any(|w| w.dim() != (d, d)) {
            return Err(Error::ShapeMismatch(format!("layer maps must be {d}×{d}")));
        }
        for a in [&self.attn_u, &self.attn_v, &self.attn_vhat, &self.attn_vtilde] {
            if a.len() != d {
                return Err(Error::ShapeMismatch(format!("attention maps must have length {d}")));
            }
        }
        if self.tensors().iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Contract("model holds non-finite parameters".into()));
        }
        Ok(())
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let z1 = Array1::zeros(self.dim());
        DomainModel {
            user_table: Array2::zeros(self.user_table.dim()),
            item_table: Array2::zeros(self.item_table.dim()),
            hyper_weights: self.hyper_weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            attn_u: z1.clone(),
            attn_v: z1.clone(),
            attn_vhat: z1.clone(),
            attn_vtilde: z1,
            train_hyper_weights: self.train_hyper_weights,
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![
            ("user_table".to_string(), self.user_table.as_slice().expect("standard layout")),
            ("item_table".to_string(), self.item_table.as_slice().expect("standard layout")),
        ];
        for (l, w) in self.hyper_weights.iter().enumerate() {
            out.push((format!("hyper_weight_{l}"), w.as_slice().expect("standard layout")));
        }
        out.push(("attn_u".into(), self.attn_u.as_slice().expect("standard layout")));
        out.push(("attn_v".into(), self.attn_v.as_slice().expect("standard layout")));
        out.push(("attn_vhat".into(), self.attn_vhat.as_slice().expect("standard layout")));
        out.push(("attn_vtilde".into(), self.attn_vtilde.as_slice().expect("standard layout")));
        out
    }

    /// Mutable views in the order of [`DomainModel::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.user_table.as_slice_mut().expect("standard layout"),
            self.item_table.as_slice_mut().expect("standard layout"),
        ];
        for w in self.hyper_weights.iter_mut() {
            out.push(w.as_slice_mut().expect("standard layout"));
        }
        out.push(self.attn_u.as_slice_mut().expect("standard layout"));
        out.push(self.attn_v.as_slice_mut().expect("standard layout"));
        out.push(self.attn_vhat.as_slice_mut().expect("standard layout"));
        out.push(self.attn_vtilde.as_slice_mut().expect("standard layout"));
        out
    }

    /// Whether the tensor at position `index` of [`DomainModel::tensors`] is updated by training.
    pub fn is_trainable(&self, index: usize) -> bool {
        let first_hyper = 2;
        !(first_hyper..first_hyper + self.layers()).contains(&index) || self.train_hyper_weights
    }
}

/// `D_V^{-1/2} γ D_E^{-1/2} γᵀ D_V^{-1/2}` kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergraphOperator {
    gamma: Array2<f64>,
    vertex_scale: Vec<f64>,
    edge_scale: Vec<f64>,
}

impl HypergraphOperator {
    /// Checks the balanced-assignment constraints within `tol` before building the operator.
    pub fn new(assignment: &ClusterAssignment, tol: f64) -> Result<Self> {
        assignment.validate(tol)?;
        let inv_sqrt = |d: f64| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 };
        let gamma = assignment.gamma.clone();
        let vertex_scale = gamma.sum_axis(Axis(1)).iter().map(|&d| inv_sqrt(d)).collect();
        let edge_scale = gamma.sum_axis(Axis(0)).iter().map(|&d| inv_sqrt(d)).collect();
        Ok(HypergraphOperator {
            gamma,
            vertex_scale,
            edge_scale,
        })
    }

    pub fn size(&self) -> usize {
        self.gamma.nrows()
    }

    /// Diagonal of `D_V`.
    pub fn vertex_degrees(&self) -> Array1<f64> {
        self.gamma.sum_axis(Axis(1))
    }

    /// Diagonal of `D_E`.
    pub fn edge_degrees(&self) -> Array1<f64> {
        self.gamma.sum_axis(Axis(0))
    }

    /// Applies the operator to every column of `x`.
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.to_owned();
        scale_rows(&mut y, &self.vertex_scale);
        let mut z = self.gamma.t().dot(&y);
        scale_rows(&mut z, &self.edge_scale);
        let mut out = self.gamma.dot(&z);
        scale_rows(&mut out, &self.vertex_scale);
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.apply(Array2::eye(self.size()).view())
    }

    /// `√(K/N)·γγᵀ`, which the operator reduces to under the balance constraints.
    pub fn scaled_gram(&self) -> Array2<f64> {
        let (n, k) = self.gamma.dim();
        self.gamma.dot(&self.gamma.t()) * (k as f64 / n as f64).sqrt()
    }
}

fn scale_rows(x: &mut Array2<f64>, scale: &[f64]) {
    for (mut row, &s) in x.rows_mut().into_iter().zip(scale) {
        row *= s;
    }
}

/// Frozen, normalized operators of one domain.
#[derive(Debug, Clone)]
pub struct DomainGraphs {
    pub num_users: usize,
    /// Normalized `(N_U + N_I)²` interaction operator.
    pub bipartite: CsrMatrix,
    /// Normalized `max(A, Aᵀ)`.
    pub item_graph: CsrMatrix,
    pub hypergraph: HypergraphOperator,
}

impl DomainGraphs {
    pub fn new(bipartite: &BipartiteGraph, item_graph: &SimilarityGraph, clusters: &ClusterAssignment) -> Result<Self> {
        if item_graph.size() != bipartite.num_items || clusters.num_items() != bipartite.num_items {
            return Err(Error::ShapeMismatch(format!(
                "graphs disagree on item count: interactions {}, item graph {}, clusters {}",
                bipartite.num_items,
                item_graph.size(),
                clusters.num_items()
            )));
        }
        Ok(DomainGraphs {
            num_users: bipartite.num_users,
            bipartite: bipartite.adjacency.sym_normalized(),
            item_graph: CsrMatrix::from_dense(item_graph.symmetrized().view()).sym_normalized(),
            hypergraph: HypergraphOperator::new(clusters, 1e-6)?,
        })
    }

    pub fn num_items(&self) -> usize {
        self.item_graph.nrows()
    }
}

/// `(1/(ℓ+1)) Σ_{l=0..ℓ} Pˡ x` for a symmetric sparse operator `P`.
fn layer_mean(op: &CsrMatrix, x: ArrayView2<f64>, layers: usize) -> Array2<f64> {
    let mut cur = x.to_owned();
    let mut acc = cur.clone();
    for _ in 0..layers {
        cur = op.matmul(cur.view());
        acc += &cur;
    }
    acc / (layers + 1) as f64
}

/// Interaction-graph propagation with layer-mean readout; returns user and item blocks.
pub fn bipartite_propagate(
    op: &CsrMatrix,
    user_table: ArrayView2<f64>,
    item_table: ArrayView2<f64>,
    layers: usize,
) -> (Array2<f64>, Array2<f64>) {
    let nu = user_table.nrows();
    let stacked = ndarray::concatenate(Axis(0), &[user_table, item_table]).expect("tables share a dimension");
    let out = layer_mean(op, stacked.view(), layers);
    let users = out.slice(ndarray::s![..nu, ..]).to_owned();
    let items = out.slice(ndarray::s![nu.., ..]).to_owned();
    (users, items)
}

/// Item-graph propagation with layer-mean readout.
pub fn itemgraph_propagate(op: &CsrMatrix, item_table: ArrayView2<f64>, layers: usize) -> Array2<f64> {
    layer_mean(op, item_table, layers)
}

/// Hypergraph propagation `ṽ⁽ˡ⁺¹⁾ = H ṽ⁽ˡ⁾ W⁽ˡ⁾`; returns the readout and every snapshot.
fn hypergraph_snapshots(op: &HypergraphOperator, item_table: ArrayView2<f64>, weights: &[Array2<f64>]) -> Vec<Array2<f64>> {
    let mut snaps = vec![item_table.to_owned()];
    for w in weights {
        let next = op.apply(snaps.last().expect("non-empty").view()).dot(w);
        snaps.push(next);
    }
    snaps
}

pub fn hypergraph_propagate(op: &HypergraphOperator, item_table: ArrayView2<f64>, weights: &[Array2<f64>]) -> Array2<f64> {
    let snaps = hypergraph_snapshots(op, item_table, weights);
    mean_of(&snaps)
}

fn mean_of(snaps: &[Array2<f64>]) -> Array2<f64> {
    let mut acc = snaps[0].clone();
    for s in &snaps[1..] {
        acc += s;
    }
    acc / snaps.len() as f64
}

/// Final representations of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationOutput {
    pub user_emb: Array2<f64>,
    pub item_emb: Array2<f64>,
    /// Interaction-graph view `v`.
    pub v: Array2<f64>,
    /// Item-graph view `v̂`.
    pub v_hat: Array2<f64>,
    /// Hypergraph view `ṽ`.
    pub v_tilde: Array2<f64>,
    /// Per-item weights in columns `(α, α̂, α̃)` applied to `(v, ṽ, v̂)`.
    pub alpha: Array2<f64>,
}

/// Adaptive per-item fusion `𝒱 = α v + α̂ ṽ + α̃ v̂` with a batch-mean user context.
pub fn fuse_item_views(
    users: Array2<f64>,
    v: Array2<f64>,
    v_tilde: Array2<f64>,
    v_hat: Array2<f64>,
    model: &DomainModel,
) -> Result<PropagationOutput> {
    if v.dim() != v_tilde.dim() || v.dim() != v_hat.dim() || users.ncols() != v.ncols() {
        return Err(Error::ShapeMismatch("item views disagree in shape".into()));
    }
    let c = user_context(users.view(), model.attn_u.view());
    let n = v.nrows();
    let mut alpha = Array2::zeros((n, 3));
    let mut fused = Array2::zeros(v.dim());
    for j in 0..n {
        let views = [v.row(j), v_tilde.row(j), v_hat.row(j)];
        let scores = [
            c + model.attn_v.dot(&views[0]),
            c + model.attn_vtilde.dot(&views[1]),
            c + model.attn_vhat.dot(&views[2]),
        ];
        let w = softmax3(scores);
        let mut out = fused.row_mut(j);
        for (k, view) in views.iter().enumerate() {
            alpha[[j, k]] = w[k];
            out.scaled_add(w[k], view);
        }
    }
    Ok(PropagationOutput {
        user_emb: users,
        item_emb: fused,
        v,
        v_hat,
        v_tilde,
        alpha,
    })
}

fn user_context(users: ArrayView2<f64>, attn_u: ArrayView1<f64>) -> f64 {
    if users.nrows() == 0 {
        return 0.0;
    }
    users.dot(&attn_u).sum() / users.nrows() as f64
}

pub(crate) fn softmax3(s: [f64; 3]) -> [f64; 3] {
    let m = s[0].max(s[1]).max(s[2]);
    let e = s.map(|x| (x - m).exp());
    let z = e[0] + e[1] + e[2];
    e.map(|x| x / z)
}

/// Hypergraph snapshots kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hyper_snapshots: Vec<Array2<f64>>,
}

/// Full forward pass of one domain.
pub fn forward(model: &DomainModel, graphs: &DomainGraphs) -> Result<(PropagationOutput, ForwardCache)> {
    if model.num_users() != graphs.num_users || model.num_items() != graphs.num_items() {
        return Err(Error::ShapeMismatch(format!(
            "model is {}×{} but graphs are {}×{}",
            model.num_users(),
            model.num_items(),
            graphs.num_users,
            graphs.num_items()
        )));
    }
    let layers = model.layers();
    let (u, v) = bipartite_propagate(&graphs.bipartite, model.user_table.view(), model.item_table.view(), layers);
    let v_hat = itemgraph_propagate(&graphs.item_graph, model.item_table.view(), layers);
    let snaps = hypergraph_snapshots(&graphs.hypergraph, model.item_table.view(), &model.hyper_weights);
    let v_tilde = mean_of(&snaps);
    let out = fuse_item_views(u, v, v_tilde, v_hat, model)?;
    Ok((out, ForwardCache { hyper_snapshots: snaps }))
}

/// Forward pass without the cache, for scoring.
pub fn propagate(model: &DomainModel, graphs: &DomainGraphs) -> Result<PropagationOutput> {
    forward(model, graphs).map(|(out, _)| out)
}

/// Back-propagates `∂L/∂𝒰` and `∂L/∂𝒱` into a gradient shaped like `model`.
pub fn backward(
    model: &DomainModel,
    graphs: &DomainGraphs,
    out: &PropagationOutput,
    cache: &ForwardCache,
    d_user: ArrayView2<f64>,
    d_item: ArrayView2<f64>,
) -> DomainModel {
    let layers = model.layers();
    let mut grad = model.zeros_like();
    let mut d_u = d_user.to_owned();
    let mut d_v = Array2::zeros(out.v.dim());
    let mut d_vt = Array2::zeros(out.v.dim());
    let mut d_vh = Array2::zeros(out.v.dim());

    // fusion
    let mut d_c = 0.0;
    for j in 0..out.v.nrows() {
        let views = [out.v.row(j), out.v_tilde.row(j), out.v_hat.row(j)];
        let attn = [&model.attn_v, &model.attn_vtilde, &model.attn_vhat];
        let g = d_item.row(j);
        let a = [out.alpha[[j, 0]], out.alpha[[j, 1]], out.alpha[[j, 2]]];
        let d_alpha = views.map(|x| g.dot(&x));
        let mean: f64 = (0..3).map(|k| a[k] * d_alpha[k]).sum();
        let d_s: [f64; 3] = std::array::from_fn(|k| a[k] * (d_alpha[k] - mean));
        let targets = [&mut d_v, &mut d_vt, &mut d_vh];
        for (k, target) in targets.into_iter().enumerate() {
            let mut row = target.row_mut(j);
            row.scaled_add(a[k], &g);
            row.scaled_add(d_s[k], attn[k]);
            d_c += d_s[k];
        }
        grad.attn_v.scaled_add(d_s[0], &views[0]);
        grad.attn_vtilde.scaled_add(d_s[1], &views[1]);
        grad.attn_vhat.scaled_add(d_s[2], &views[2]);
    }
    let nu = out.user_emb.nrows();
    if nu > 0 {
        grad.attn_u = out.user_emb.sum_axis(Axis(0)) * (d_c / nu as f64);
        for mut row in d_u.rows_mut() {
            row.scaled_add(d_c / nu as f64, &model.attn_u);
        }
    }

    // interaction graph: the operator is symmetric, so the adjoint is the same layer mean
    let stacked = ndarray::concatenate(Axis(0), &[d_u.view(), d_v.view()]).expect("same width");
    let d_tables = layer_mean(&graphs.bipartite, stacked.view(), layers);
    grad.user_table += &d_tables.slice(ndarray::s![..nu, ..]);
    grad.item_table += &d_tables.slice(ndarray::s![nu.., ..]);

    // item graph
    grad.item_table += &layer_mean(&graphs.item_graph, d_vh.view(), layers);

    // hypergraph, from the last snapshot down
    let share = 1.0 / (layers + 1) as f64;
    let mut d_snap = &d_vt * share;
    for l in (0..layers).rev() {
        let propagated = graphs.hypergraph.apply(cache.hyper_snapshots[l].view());
        if model.train_hyper_weights {
            grad.hyper_weights[l] = propagated.t().dot(&d_snap);
        }
        let back = graphs.hypergraph.apply(d_snap.dot(&model.hyper_weights[l].t()).view());
        d_snap = back + &d_vt * share;
    }
    grad.item_table += &d_snap;
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_bipartite() -> CsrMatrix {
        // users 0,1 then items 2,3; edges u1–v1, u2–v1, u2–v2
        let edges = [(0, 2), (1, 2), (1, 3)];
        let mut t = Vec::new();
        for &(a, b) in &edges {
            t.push((a, b, 1.0));
            t.push((b, a, 1.0));
        }
        CsrMatrix::from_triplets(4, 4, t).sym_normalized()
    }

    #[test]
    fn zero_layers_return_tables() {
        let op = tiny_bipartite();
        let users = array![[1.0, 2.0], [3.0, 4.0]];
        let items = array![[5.0, 6.0], [7.0, 8.0]];
        let (u, v) = bipartite_propagate(&op, users.view(), items.view(), 0);
        assert_eq!(u, users);
        assert_eq!(v, items);
    }

    #[test]
    fn hand_normalized_first_layer() {
        let op = tiny_bipartite();
        let users = array![[0.0, 0.0], [0.0, 0.0]];
        let items = array![[1.0, -2.0], [0.5, 3.0]];
        let (u, _) = bipartite_propagate(&op, users.view(), items.view(), 1);
        // layer 1 of u1 is v1/√(1·2); readout halves it
        let expected = &items.row(0) / 2f64.sqrt() / 2.0;
        assert!((&u.row(0) - &expected).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn isolated_user_keeps_scaled_table() {
        let op = CsrMatrix::from_triplets(3, 3, vec![(1, 2, 1.0), (2, 1, 1.0)]).sym_normalized();
        let users = array![[2.0, 4.0], [1.0, 1.0]];
        let items = array![[3.0, 3.0]];
        let (u, _) = bipartite_propagate(&op, users.view(), items.view(), 3);
        assert_eq!(u.row(0), array![0.5, 1.0]);
    }

    #[test]
    fn item_graph_cases() {
        let empty = CsrMatrix::from_triplets(2, 2, vec![]);
        let items = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(itemgraph_propagate(&empty, items.view(), 2), &items / 3.0);
        let complete = CsrMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).sym_normalized();
        let one = complete.matmul(items.view());
        assert_eq!(one.row(0), items.row(1));
    }

    #[test]
    fn item_graph_matches_dense_powers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 6;
        let mut a = Array2::from_shape_fn((n, n), |_| if rng.random::<f64>() < 0.4 { rng.random::<f64>() } else { 0.0 });
        a.diag_mut().fill(0.0);
        let graph = SimilarityGraph::new(a).unwrap();
        let sym = graph.symmetrized();
        let op = CsrMatrix::from_dense(sym.view()).sym_normalized();
        let x = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>() - 0.5);

        let deg: Vec<f64> = sym.rows().into_iter().map(|r| r.sum()).collect();
        let p = Array2::from_shape_fn((n, n), |(i, j)| {
            if deg[i] > 0.0 && deg[j] > 0.0 {
                sym[[i, j]] / (deg[i] * deg[j]).sqrt()
            } else {
                0.0
            }
        });
        let p2 = p.dot(&p);
        let p3 = p2.dot(&p);
        let oracle = (&x + &p.dot(&x) + &p2.dot(&x) + &p3.dot(&x)) / 4.0;
        assert!(max_abs_diff(itemgraph_propagate(&op, x.view(), 3).view(), oracle.view()) < 1e-12);
    }

    #[test]
    fn one_hot_hypergraph_sums_cluster_members() {
        let assign = ClusterAssignment::from_labels(&[0, 1, 0, 1], 2);
        let op = HypergraphOperator::new(&assign, 1e-12).unwrap();
        let x = array![[1.0], [10.0], [100.0], [1000.0]];
        let out = op.apply(x.view());
        let s = (2.0f64 / 4.0).sqrt();
        assert!((out[[0, 0]] - s * 101.0).abs() < 1e-12);
        assert!((out[[1, 0]] - s * 1010.0).abs() < 1e-12);
        assert!(max_abs_diff(op.to_dense().view(), op.scaled_gram().view()) < 1e-12);
        assert!(op.vertex_degrees().iter().all(|&d| (d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn uniform_hypergraph_mixes_everything() {
        let assign = ClusterAssignment {
            gamma: Array2::from_elem((6, 3), 1.0 / 3.0),
        };
        let op = HypergraphOperator::new(&assign, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((6, 2), |_| rng.random::<f64>());
        let out = hypergraph_propagate(&op, x.view(), &[Array2::eye(2)]);
        let layer1 = (&out * 2.0) - &x;
        for r in layer1.rows() {
            assert!((&r - &layer1.row(0)).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn invalid_assignment_is_rejected() {
        let assign = ClusterAssignment {
            gamma: array![[1.0, 0.0], [1.0, 0.0]],
        };
        assert!(matches!(HypergraphOperator::new(&assign, 1e-9), Err(Error::Contract(_))));
    }

    #[test]
    fn fusion_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = DomainModel::new(3, 2, 2, 1, 0.1, &mut rng).unwrap();
        let users = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>());
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let out = fuse_item_views(users.clone(), v.clone(), v.clone(), v.clone(), &model).unwrap();
        assert!(out.alpha.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(out.item_emb, v);
        assert_eq!(out.user_emb, users);

        model.attn_v = array![0.0, 1e3];
        let vt = array![[1.0, 0.0], [1.0, 0.0]];
        let out = fuse_item_views(users, v.clone(), vt.clone(), vt, &model).unwrap();
        assert!(out.alpha[[1, 0]] > 1.0 - 1e-12);
        assert!(max_abs_diff(out.item_emb.row(1).insert_axis(Axis(0)), v.row(1).insert_axis(Axis(0))) < 1e-12);
    }

    #[test]
    fn fusion_weights_match_scalar_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = DomainModel::new(4, 3, 3, 1, 0.1, &mut rng).unwrap();
        for a in [&mut model.attn_u, &mut model.attn_v, &mut model.attn_vhat, &mut model.attn_vtilde] {
            a.mapv_inplace(|_| rng.random::<f64>() - 0.5);
        }
        let g = |r: &mut ChaCha8Rng, n| Array2::from_shape_fn((n, 3), |_| r.random::<f64>() - 0.5);
        let (u, v, vt, vh) = (g(&mut rng, 4), g(&mut rng, 3), g(&mut rng, 3), g(&mut rng, 3));
        let out = fuse_item_views(u.clone(), v.clone(), vt.clone(), vh.clone(), &model).unwrap();
        let c: f64 = (0..4).map(|i| model.attn_u.dot(&u.row(i))).sum::<f64>() / 4.0;
        for j in 0..3 {
            let e = [
                (c + model.attn_v.dot(&v.row(j))).exp(),
                (c + model.attn_vtilde.dot(&vt.row(j))).exp(),
                (c + model.attn_vhat.dot(&vh.row(j))).exp(),
            ];
            let z: f64 = e.iter().sum();
            for k in 0..3 {
                assert!((out.alpha[[j, k]] - e[k] / z).abs() < 1e-14);
            }
            assert!((out.alpha.row(j).sum() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn propagation_is_linear_in_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = tiny_bipartite();
        let users = Array2::from_shape_fn((2, 3), |_| rng.random::<f64>());
        let items = Array2::from_shape_fn((2, 3), |_| rng.random::<f64>());
        let (u1, v1) = bipartite_propagate(&op, users.view(), items.view(), 3);
        let (u2, v2) = bipartite_propagate(&op, (&users * 2.5).view(), (&items * 2.5).view(), 3);
        assert!(max_abs_diff((&u1 * 2.5).view(), u2.view()) < 1e-12);
        assert!(max_abs_diff((&v1 * 2.5).view(), v2.view()) < 1e-12);
    }

    #[test]
    fn model_shapes_and_tensor_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = DomainModel::new(5, 4, 3, 2, 0.1, &mut rng).unwrap();
        m.validate().unwrap();
        let names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[2], "hyper_weight_0");
        assert_eq!(names.len(), m.tensors_mut().len());
        assert!(!m.is_trainable(2) && m.is_trainable(0) && m.is_trainable(4));
        m.attn_u[0] = f64::NAN;
        assert!(m.validate().is_err());
        assert!(DomainModel::new(1, 1, 0, 1, 0.1, &mut rng).is_err());
    }
}
