//! Item-item similarity graphs per modality and their robust fusion into a
//! single consensus graph.
//!
//! Fusion minimizes
//!
//! ```text
//! Q(A, Δ) = 1/M Σ_m ( ½‖A + Δ_m − Ŝ_m‖² + μ‖Δ_m‖₁ )   s.t. A ∈ [0, 1]
//! ```
//!
//! by exact block-coordinate descent: a soft-threshold step for every residual
//! `Δ_m` followed by a clipped mean for `A`. Both half-steps are exact
//! minimizers, so the objective never increases.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{cosine, max_abs_diff};

/// Dense item-item weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub weights: Array2<f64>,
}

impl SimilarityGraph {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() != weights.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "similarity graph must be square, got {}x{}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        Ok(SimilarityGraph { weights })
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }

    /// `max(A, Aᵀ)` entrywise.
    pub fn symmetrized(&self) -> Array2<f64> {
        let w = &self.weights;
        let mut out = w.clone();
        Zip::from(&mut out).and(&w.t()).for_each(|a, &b| *a = a.max(b));
        out
    }

    /// Writes non-zero entries as `row<TAB>col<TAB>weight` under `# n=<N>`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self
            .weights
            .indexed_iter()
            .filter(|(_, &v)| v != 0.0)
            .map(|((r, c), &v)| (r, c, v));
        io::write_triples(path, &format!("n={}", self.size()), entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (_, m) = io::read_square_triples(path)?;
        SimilarityGraph::new(m)
    }
}

/// Per-modality residual `Δ_m` left over after fusion.
pub type ModalResidual = Array2<f64>;

/// `S_ij = exp(cos(x_i, x_j))`; symmetric with diagonal exactly `e`.
pub fn modal_similarity(features: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = features.nrows();
    for i in 0..n {
        let row = features.row(i);
        if row.dot(&row) == 0.0 {
            return Err(Error::DegenerateFeature(i));
        }
    }
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        s[[i, i]] = std::f64::consts::E;
        for j in (i + 1)..n {
            let c = cosine(features.row(i), features.row(j)).expect("norms checked above");
            let v = c.exp();
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    Ok(s)
}

/// Row-wise top-`z` binarization excluding the diagonal; ties go to the lower index.
pub fn topz_sparsify(similarity: ArrayView2<f64>, z: usize) -> Result<SimilarityGraph> {
    let n = similarity.nrows();
    if similarity.ncols() != n {
        return Err(Error::ShapeMismatch("similarity matrix must be square".into()));
    }
    if z == 0 || z >= n {
        return Err(Error::InvalidParameter(format!("top-z needs 1 <= z < {n}, got z={z}")));
    }
    let mut out = Array2::zeros((n, n));
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i));
        // stable sort keeps ascending index order among equal values
        candidates.sort_by(|&a, &b| similarity[[i, b]].total_cmp(&similarity[[i, a]]));
        for &j in candidates.iter().take(z) {
            out[[i, j]] = 1.0;
        }
    }
    SimilarityGraph::new(out)
}

/// Soft-threshold `T_μ(x)`: zero inside `[−μ, μ]`, shrunk toward zero by `μ` outside.
pub fn soft_threshold(x: f64, mu: f64) -> f64 {
    if x >= mu {
        x - mu
    } else if x <= -mu {
        x + mu
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RisgfOptions {
    pub mu: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for RisgfOptions {
    fn default() -> Self {
        RisgfOptions {
            mu: 0.1,
            max_iters: 500,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RisgfOutput {
    pub graph: SimilarityGraph,
    pub residuals: Vec<ModalResidual>,
    /// Objective after initialization and after every iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Fusion objective `Q(A, Δ)`.
pub fn risgf_objective(graphs: &[SimilarityGraph], fused: ArrayView2<f64>, residuals: &[ModalResidual], mu: f64) -> f64 {
    let m = graphs.len() as f64;
    graphs
        .iter()
        .zip(residuals)
        .map(|(g, d)| {
            let mut fit = 0.0;
            let mut l1 = 0.0;
            Zip::from(&fused).and(d).and(&g.weights).for_each(|&a, &dv, &s| {
                let e = a + dv - s;
                fit += e * e;
                l1 += dv.abs();
            });
            0.5 * fit + mu * l1
        })
        .sum::<f64>()
        / m
}

/// Largest violation of the first-order optimality conditions of `Q`.
///
/// For `A`: the mean residual is zero inside `(0, 1)` and has the sign that
/// pushes against the active bound otherwise. For each `Δ_m`: the residual
/// plus `μ·sign(Δ_m)` vanishes where `Δ_m ≠ 0`, and stays within `μ` where it is zero.
pub fn risgf_stationarity(graphs: &[SimilarityGraph], fused: ArrayView2<f64>, residuals: &[ModalResidual], mu: f64) -> f64 {
    let n = fused.nrows();
    let m = graphs.len() as f64;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = fused[[i, j]];
            let mut mean_r = 0.0;
            for (g, d) in graphs.iter().zip(residuals) {
                let dv = d[[i, j]];
                let e = a + dv - g.weights[[i, j]];
                mean_r += e;
                let v = if dv != 0.0 {
                    (e + mu * dv.signum()).abs()
                } else {
                    (e.abs() - mu).max(0.0)
                };
                worst = worst.max(v);
            }
            mean_r /= m;
            let v = if a <= 0.0 {
                (-mean_r).max(0.0)
            } else if a >= 1.0 {
                mean_r.max(0.0)
            } else {
                mean_r.abs()
            };
            worst = worst.max(v);
        }
    }
    worst
}

/// Alternates the soft-threshold and clipped-mean updates until neither `A`
/// nor any `Δ_m` moves by more than `tol`.
pub fn risgf_fuse(graphs: &[SimilarityGraph], opts: &RisgfOptions) -> Result<RisgfOutput> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::InvalidParameter("fusion needs at least one modality".into()))?;
    let n = first.size();
    for g in graphs {
        if g.weights.dim() != (n, n) {
            return Err(Error::ShapeMismatch(format!(
                "modal graphs differ in size: {n} vs {:?}",
                g.weights.dim()
            )));
        }
        if g.weights.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidParameter("NaN in modal graph".into()));
        }
    }
    if !(opts.mu >= 0.0) {
        return Err(Error::InvalidParameter(format!("mu must be >= 0, got {}", opts.mu)));
    }

    let m = graphs.len() as f64;
    let clipped_mean = |residuals: &[ModalResidual]| {
        let mut acc = Array2::<f64>::zeros((n, n));
        for (g, d) in graphs.iter().zip(residuals) {
            Zip::from(&mut acc).and(&g.weights).and(d).for_each(|a, &s, &dv| *a += s - dv);
        }
        acc.mapv_inplace(|v| (v / m).clamp(0.0, 1.0));
        acc
    };

    let mut residuals: Vec<ModalResidual> = vec![Array2::zeros((n, n)); graphs.len()];
    let mut fused = clipped_mean(&residuals);
    let mut trace = vec![risgf_objective(graphs, fused.view(), &residuals, opts.mu)];
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let mut delta_change: f64 = 0.0;
        for (g, d) in graphs.iter().zip(residuals.iter_mut()) {
            Zip::from(d).and(&g.weights).and(&fused).for_each(|dv, &s, &a| {
                let next = soft_threshold(s - a, opts.mu);
                delta_change = delta_change.max((next - *dv).abs());
                *dv = next;
            });
        }
        let next = clipped_mean(&residuals);
        let fused_change = max_abs_diff(next.view(), fused.view());
        fused = next;
        trace.push(risgf_objective(graphs, fused.view(), &residuals, opts.mu));
        if fused_change.max(delta_change) <= opts.tol {
            break;
        }
    }

    Ok(RisgfOutput {
        graph: SimilarityGraph::new(fused)?,
        residuals,
        objective_trace: trace,
        iterations,
    })
}

/// Similarity, top-`z` sparsification and fusion over every modality of a domain.
pub fn fuse_modalities<'a>(
    features: impl IntoIterator<Item = ArrayView2<'a, f64>>,
    z: usize,
    opts: &RisgfOptions,
) -> Result<RisgfOutput> {
    let graphs = features
        .into_iter()
        .map(|f| topz_sparsify(modal_similarity(f)?.view(), z))
        .collect::<Result<Vec<_>>>()?;
    risgf_fuse(&graphs, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(v: f64) -> SimilarityGraph {
        SimilarityGraph::new(array![[v]]).unwrap()
    }

    #[test]
    fn similarity_kernel_values() {
        let x = array![[1.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.0, 1.0]];
        let s = modal_similarity(x.view()).unwrap();
        let e = std::f64::consts::E;
        assert_eq!(s[[0, 1]], e);
        assert!((s[[0, 2]] - 1.0).abs() < 1e-15);
        // exp(1/sqrt 2) evaluated independently
        assert!((s[[0, 3]] - 2.028_114_981_647_472).abs() < 1e-12);
        assert_eq!(s, s.t());
        assert!(s.iter().all(|&v| v >= (-1.0f64).exp() - 1e-12 && v <= e + 1e-12));
    }

    #[test]
    fn zero_row_names_the_item() {
        let x = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(modal_similarity(x.view()), Err(Error::DegenerateFeature(1))));
    }

    #[test]
    fn topz_picks_largest_off_diagonal() {
        let s = array![
            [9.0, 0.9, 0.5, 0.1],
            [0.9, 9.0, 0.2, 0.3],
            [0.5, 0.2, 9.0, 0.4],
            [0.1, 0.3, 0.4, 9.0]
        ];
        let g = topz_sparsify(s.view(), 1).unwrap();
        assert_eq!(g.weights.row(0).to_vec(), vec![0.0, 1.0, 0.0, 0.0]);
        let full = topz_sparsify(s.view(), 3).unwrap();
        assert_eq!(full.weights.row(2).to_vec(), vec![1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn topz_ties_prefer_lower_index() {
        let s = array![[1.0, 0.1, 0.5, 0.5], [0.0; 4], [0.0; 4], [0.0; 4]];
        let g = topz_sparsify(s.view(), 1).unwrap();
        // exhaustive stable-order oracle: first maximal off-diagonal index
        let oracle = (1..4).fold(1, |best, j| if s[[0, j]] > s[[0, best]] { j } else { best });
        assert_eq!(oracle, 2);
        assert_eq!(g.weights[[0, 2]], 1.0);
        assert_eq!(g.weights[[0, 3]], 0.0);
    }

    #[test]
    fn topz_rejects_bad_z() {
        let s = Array2::<f64>::zeros((3, 3));
        assert!(topz_sparsify(s.view(), 3).is_err());
        assert!(topz_sparsify(s.view(), 0).is_err());
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(0.05, 0.1), 0.0);
        assert_eq!(soft_threshold(-0.1, 0.1), 0.0);
        assert!((soft_threshold(0.5, 0.1) - 0.4).abs() < 1e-15);
        assert!((soft_threshold(-0.5, 0.1) + 0.4).abs() < 1e-15);
    }

    #[test]
    fn single_modality_fits_exactly() {
        let s = SimilarityGraph::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let out = risgf_fuse(&[s.clone()], &RisgfOptions::default()).unwrap();
        assert_eq!(out.graph, s);
        assert!(out.residuals[0].iter().all(|&v| v == 0.0));
        assert_eq!(*out.objective_trace.last().unwrap(), 0.0);
    }

    #[test]
    fn identical_modalities_agree() {
        let s = SimilarityGraph::new(array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]).unwrap();
        let out = risgf_fuse(&[s.clone(), s.clone()], &RisgfOptions::default()).unwrap();
        assert_eq!(out.graph, s);
        assert!(out.residuals.iter().all(|d| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn scalar_instance_reaches_hand_solution() {
        let out = risgf_fuse(&[scalar(1.0), scalar(0.0)], &RisgfOptions::default()).unwrap();
        assert!((out.graph.weights[[0, 0]] - 0.5).abs() < 1e-9);
        assert!((out.residuals[0][[0, 0]] - 0.4).abs() < 1e-9);
        assert!((out.residuals[1][[0, 0]] + 0.4).abs() < 1e-9);
        assert!((out.objective_trace.last().unwrap() - 0.045).abs() < 1e-9);
        let graphs = [scalar(1.0), scalar(0.0)];
        let r = risgf_stationarity(&graphs, out.graph.weights.view(), &out.residuals, 0.1);
        assert!(r < 1e-12);
    }

    #[test]
    fn three_modalities_converge_to_interior_point() {
        // fixed point A = (2 + A − μ)/3 with Δ_1 = Δ_2 = 0 and Δ_3 = μ − A
        let out = risgf_fuse(&[scalar(1.0), scalar(1.0), scalar(0.0)], &RisgfOptions::default()).unwrap();
        assert!((out.graph.weights[[0, 0]] - 0.95).abs() < 1e-8);
        assert!(out.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn fusion_validates_inputs() {
        assert!(risgf_fuse(&[], &RisgfOptions::default()).is_err());
        let a = SimilarityGraph::new(Array2::zeros((2, 2))).unwrap();
        let b = SimilarityGraph::new(Array2::zeros((3, 3))).unwrap();
        assert!(matches!(risgf_fuse(&[a.clone(), b], &RisgfOptions::default()), Err(Error::ShapeMismatch(_))));
        let nan = SimilarityGraph::new(array![[f64::NAN, 0.0], [0.0, 0.0]]).unwrap();
        assert!(risgf_fuse(&[a, nan], &RisgfOptions::default()).is_err());
    }

    #[test]
    fn graph_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tsv");
        let g = SimilarityGraph::new(array![[0.0, 0.25], [1.0, 0.0]]).unwrap();
        g.save(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("# n=2\n"));
        assert_eq!(SimilarityGraph::load(&p).unwrap(), g);
    }
}
