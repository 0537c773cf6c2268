//! Guided optimal user matching.
//!
//! Source and target users of a batch are matched by entropic optimal
//! transport over squared embedding distances, with the cost of every known
//! overlapped pair forced to zero. The smoothed dual
//!
//! ```text
//! J(ω) = Σ_j ε log Σ_i exp((ω_i − Q_ij)/ε) − Σ_i ω_i
//! ```
//!
//! is minimized by a Jacobi fixed-point iteration on `ω` with the last
//! coordinate pinned to zero, and the plan is recovered as a column softmax.

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::log_sum_exp;

/// `C_ij = ‖U_s[i] − U_t[j]‖²`.
pub fn build_cost(source: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Array2<f64>> {
    if source.ncols() != target.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims differ: {} vs {}",
            source.ncols(),
            target.ncols()
        )));
    }
    if source.nrows() != target.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "matching needs equal batch sizes, got {} and {}",
            source.nrows(),
            target.nrows()
        )));
    }
    Ok(Array2::from_shape_fn((source.nrows(), target.nrows()), |(i, j)| {
        source
            .row(i)
            .iter()
            .zip(target.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }))
}

/// Binary mask that is zero exactly at declared overlapped `(source, target)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMask {
    size: usize,
    pairs: Vec<(usize, usize)>,
}

impl GuidanceMask {
    /// Validates that pairs are in range and use every row and column at most once.
    pub fn new(size: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut row_used = vec![false; size];
        let mut col_used = vec![false; size];
        for &(i, j) in pairs {
            if i >= size || j >= size {
                return Err(Error::Contract(format!("overlap pair ({i}, {j}) outside batch of {size}")));
            }
            if std::mem::replace(&mut row_used[i], true) || std::mem::replace(&mut col_used[j], true) {
                return Err(Error::Contract(format!("duplicate overlap pair touching ({i}, {j})")));
            }
        }
        let mut pairs = pairs.to_vec();
        pairs.sort_unstable();
        Ok(GuidanceMask { size, pairs })
    }

    pub fn unmasked(size: usize) -> Self {
        GuidanceMask { size, pairs: Vec::new() }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::ones((self.size, self.size));
        for &(i, j) in &self.pairs {
            m[[i, j]] = 0.0;
        }
        m
    }
}

/// `Q = C ⊙ M`.
pub fn apply_mask(cost: ArrayView2<f64>, mask: &GuidanceMask) -> Result<Array2<f64>> {
    if cost.dim() != (mask.size, mask.size) {
        return Err(Error::ShapeMismatch(format!(
            "cost {:?} vs mask of size {}",
            cost.dim(),
            mask.size
        )));
    }
    let mut q = cost.to_owned();
    for &(i, j) in &mask.pairs {
        q[[i, j]] = 0.0;
    }
    Ok(q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WafiOptions {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for WafiOptions {
    fn default() -> Self {
        WafiOptions {
            epsilon: 0.01,
            max_iters: 5000,
            tol: 1e-10,
        }
    }
}

/// Dual potential `ω̂` with its last coordinate pinned to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotential {
    pub omega: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Sup-norm change of `ω̂` per iteration.
    pub residuals: Vec<f64>,
    /// Smoothed dual objective, starting with the value at `ω̂ = 0`.
    pub objective: Vec<f64>,
}

impl DualPotential {
    pub fn residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }
}

/// `κ_j = −ε log Σ_k exp((ω_k − Q_kj)/ε)` for every column, computed with shifted exponentials.
fn soft_c_transform(q: ArrayView2<f64>, omega: &[f64], eps: f64) -> Vec<f64> {
    c_transform_of_rows(q.t(), omega, eps)
}

/// [`soft_c_transform`] over the rows of `Qᵀ`.
fn c_transform_of_rows(qt: ArrayView2<f64>, omega: &[f64], eps: f64) -> Vec<f64> {
    qt.rows()
        .into_iter()
        .map(|col| -eps * log_sum_exp(col.iter().zip(omega).map(|(&qkj, &wk)| (wk - qkj) / eps)))
        .collect()
}

/// Smoothed dual objective `J(ω)`.
pub fn smoothed_dual_objective(q: ArrayView2<f64>, omega: &[f64], eps: f64) -> f64 {
    dual_from_transform(&soft_c_transform(q, omega, eps), omega)
}

fn dual_from_transform(kappa: &[f64], omega: &[f64]) -> f64 {
    -kappa.iter().sum::<f64>() - omega.iter().sum::<f64>()
}

fn check_square_finite(q: ArrayView2<f64>) -> Result<usize> {
    if q.nrows() != q.ncols() {
        return Err(Error::ShapeMismatch(format!("matching cost must be square, got {:?}", q.dim())));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite matching cost".into()));
    }
    Ok(q.nrows())
}

/// Runs the fixed-point iteration without treating an exhausted budget as an error.
pub fn wafi_iterate(q: ArrayView2<f64>, opts: &WafiOptions) -> Result<DualPotential> {
    wafi_iterate_from(q, opts, vec![0.0; q.nrows()])
}

/// Same as [`wafi_iterate`] but starting from `omega` (its last entry is reset to zero).
pub fn wafi_iterate_from(q: ArrayView2<f64>, opts: &WafiOptions, mut omega: Vec<f64>) -> Result<DualPotential> {
    let n = check_square_finite(q)?;
    if omega.len() != n {
        return Err(Error::ShapeMismatch(format!("potential of length {} for {n} users", omega.len())));
    }
    if let Some(last) = omega.last_mut() {
        *last = 0.0;
    }
    let eps = opts.epsilon;
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {eps}")));
    }
    let mut out = DualPotential {
        omega: Vec::new(),
        epsilon: eps,
        iterations: 0,
        converged: n <= 1,
        residuals: Vec::new(),
        objective: Vec::new(),
    };
    let qt = q.t().as_standard_layout().into_owned();
    let mut kappa = c_transform_of_rows(qt.view(), &omega, eps);
    out.objective.push(dual_from_transform(&kappa, &omega));
    if n <= 1 {
        out.omega = omega;
        return Ok(out);
    }
    let mut next = vec![0.0; n];
    while out.iterations < opts.max_iters {
        out.iterations += 1;
        // every coordinate reads the previous iterate (Jacobi sweep)
        for (i, slot) in next.iter_mut().enumerate().take(n - 1) {
            let row = q.row(i);
            *slot = -eps * log_sum_exp(row.iter().zip(&kappa).map(|(&qij, &kj)| (kj - qij) / eps));
        }
        next[n - 1] = 0.0;
        let change = next
            .iter()
            .zip(&omega)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut omega, &mut next);
        out.residuals.push(change);
        kappa = c_transform_of_rows(qt.view(), &omega, eps);
        out.objective.push(dual_from_transform(&kappa, &omega));
        if change < opts.tol {
            out.converged = true;
            break;
        }
    }
    out.omega = omega;
    Ok(out)
}

/// Solves for `ω̂`; an exhausted iteration budget is a convergence error.
pub fn wafi_solve(q: ArrayView2<f64>, opts: &WafiOptions) -> Result<DualPotential> {
    let pot = wafi_iterate(q, opts)?;
    if !pot.converged {
        return Err(Error::Convergence {
            what: "optimal user matching",
            iterations: pot.iterations,
            residual: pot.residual(),
        });
    }
    Ok(pot)
}

/// Soft user-user matching; every column sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingPlan {
    pub pi: Array2<f64>,
}

impl MatchingPlan {
    pub fn size(&self) -> usize {
        self.pi.nrows()
    }

    /// For each target column, the source row holding the most mass (lowest row on ties).
    pub fn column_argmax(&self) -> Vec<usize> {
        self.pi.columns().into_iter().map(|c| argmax(c.iter().copied())).collect()
    }

    /// For each source row, the target column holding the most mass.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.pi.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
    }

    /// `⟨π, Q⟩`.
    pub fn transport_cost(&self, q: ArrayView2<f64>) -> f64 {
        self.pi.iter().zip(q.iter()).map(|(p, c)| p * c).sum()
    }

    /// Writes entries above `1e−9` as `i<TAB>j<TAB>mass` under `# n=<N> eps=<ε>`.
    pub fn save(&self, path: &Path, epsilon: f64) -> Result<()> {
        let entries = self
            .pi
            .indexed_iter()
            .filter(|(_, &v)| v > 1e-9)
            .map(|((i, j), &v)| (i, j, v));
        io::write_triples(path, &format!("n={} eps={epsilon}", self.size()), entries)
    }

    pub fn load(path: &Path) -> Result<(Self, f64)> {
        let (header, pi) = io::read_square_triples(path)?;
        let eps: f64 = io::header_value(path, &header, "eps")?;
        Ok((MatchingPlan { pi }, eps))
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// `π_ij = exp((ω̂_i − Q_ij)/ε) / Σ_k exp((ω̂_k − Q_kj)/ε)`, one shifted softmax per column.
pub fn recover_plan(q: ArrayView2<f64>, potential: &DualPotential) -> MatchingPlan {
    let eps = potential.epsilon;
    let omega = &potential.omega;
    let mut pi = Array2::zeros(q.dim());
    for (j, col) in q.columns().into_iter().enumerate() {
        let logits: Vec<f64> = col.iter().zip(omega).map(|(&qkj, &wk)| (wk - qkj) / eps).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (i, w) in weights.into_iter().enumerate() {
            pi[[i, j]] = w / total;
        }
    }
    MatchingPlan { pi }
}

/// Options for [`match_users`].
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOptions {
    pub wafi: WafiOptions,
    /// Accept a plan whose potential did not meet `tol` within the budget.
    pub allow_unconverged: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            wafi: WafiOptions::default(),
            allow_unconverged: false,
        }
    }
}

/// Cost → mask → dual potential → plan for one square batch.
pub fn match_users(
    source: ArrayView2<f64>,
    target: ArrayView2<f64>,
    overlap: &[(usize, usize)],
    opts: &MatchOptions,
) -> Result<(MatchingPlan, DualPotential)> {
    let cost = build_cost(source, target)?;
    let mask = GuidanceMask::new(cost.nrows(), overlap)?;
    let q = apply_mask(cost.view(), &mask)?;
    let pot = if opts.allow_unconverged {
        wafi_iterate(q.view(), &opts.wafi)?
    } else {
        wafi_solve(q.view(), &opts.wafi)?
    };
    Ok((recover_plan(q.view(), &pot), pot))
}

/// Default size limit for [`exact_assignment`].
pub const ORACLE_LIMIT: usize = 10;

/// Minimum-cost perfect matching for small instances; `perm[i]` is row `i`'s column.
pub fn exact_assignment(q: ArrayView2<f64>, limit: usize) -> Result<(Vec<usize>, f64)> {
    let n = check_square_finite(q)?;
    if n > limit {
        return Err(Error::InvalidParameter(format!("assignment oracle limited to n <= {limit}, got {n}")));
    }
    Ok(hungarian(q))
}

/// Exhaustive scan over all `n!` permutations (Heap's algorithm).
pub fn exhaustive_assignment(q: ArrayView2<f64>) -> (Vec<usize>, f64) {
    let n = q.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| q[[i, j]]).sum::<f64>();
    let mut best = (perm.clone(), cost(&perm));
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let v = cost(&perm);
            if v < best.1 {
                best = (perm.clone(), v);
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Hungarian method with row/column potentials, `O(n³)`.
pub fn hungarian(cost: ArrayView2<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square matrix");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    let total = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    (perm, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_square(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |_| rng.random::<f64>())
    }

    #[test]
    fn cost_is_squared_distance() {
        let a = array![[0.0, 0.0]];
        let b = array![[3.0, 4.0]];
        assert_eq!(build_cost(a.view(), b.view()).unwrap()[[0, 0]], 25.0);
        let same = array![[1.0, 2.0], [3.0, -1.0]];
        let c = build_cost(same.view(), same.view()).unwrap();
        assert_eq!(c[[0, 0]], 0.0);
        assert_eq!(c[[1, 1]], 0.0);
    }

    #[test]
    fn cost_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_square(&mut rng, 3).slice(ndarray::s![.., 0..2]).to_owned();
        let b = random_square(&mut rng, 3).slice(ndarray::s![.., 0..2]).to_owned();
        let c = build_cost(a.view(), b.view()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut d = 0.0;
                for k in 0..2 {
                    d += (a[[i, k]] - b[[j, k]]).powi(2);
                }
                assert!((c[[i, j]] - d).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cost_rejects_mismatch() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((2, 2));
        assert!(build_cost(a.view(), b.view()).is_err());
        let c = Array2::<f64>::zeros((3, 3));
        assert!(build_cost(a.view(), c.view()).is_err());
    }

    #[test]
    fn mask_zeroes_only_declared_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_square(&mut rng, 3);
        assert_eq!(apply_mask(c.view(), &GuidanceMask::unmasked(3)).unwrap(), c);
        let diag = GuidanceMask::new(3, &[(0, 0), (1, 1), (2, 2)]).unwrap();
        let q = apply_mask(c.view(), &diag).unwrap();
        assert!((0..3).all(|i| q[[i, i]] == 0.0));
        let one = GuidanceMask::new(3, &[(1, 2)]).unwrap();
        let q = apply_mask(c.view(), &one).unwrap();
        for ((i, j), &v) in q.indexed_iter() {
            if (i, j) == (1, 2) {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, c[[i, j]]);
            }
        }
        assert_eq!(one.to_dense().sum(), 8.0);
    }

    #[test]
    fn mask_rejects_duplicates() {
        assert!(GuidanceMask::new(3, &[(0, 1), (0, 2)]).is_err());
        assert!(GuidanceMask::new(3, &[(0, 1), (2, 1)]).is_err());
        assert!(GuidanceMask::new(3, &[(0, 3)]).is_err());
    }

    #[test]
    fn single_user_is_trivially_converged() {
        let q = array![[0.7]];
        let pot = wafi_solve(q.view(), &WafiOptions::default()).unwrap();
        assert_eq!(pot.omega, vec![0.0]);
        assert_eq!(recover_plan(q.view(), &pot).pi, array![[1.0]]);
    }

    #[test]
    fn zero_cost_has_zero_potential() {
        let q = Array2::<f64>::zeros((4, 4));
        for eps in [1e-3, 0.1, 10.0] {
            let pot = wafi_solve(q.view(), &WafiOptions { epsilon: eps, ..Default::default() }).unwrap();
            assert!(pot.omega.iter().all(|&w| w.abs() < 1e-12));
        }
    }

    #[test]
    fn small_epsilon_rounds_to_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let q = random_square(&mut rng, 4);
            let pot = wafi_iterate(q.view(), &WafiOptions { epsilon: 1e-3, ..Default::default() }).unwrap();
            let plan = recover_plan(q.view(), &pot);
            let cols = plan.column_argmax();
            let (_, opt) = exhaustive_assignment(q.view());
            let cost: f64 = cols.iter().enumerate().map(|(j, &i)| q[[i, j]]).sum();
            assert!((cost - opt).abs() < 1e-6 * (1.0 + opt.abs()));
        }
    }

    #[test]
    fn columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_square(&mut rng, 5);
        let pot = DualPotential {
            omega: (0..5).map(|_| rng.random::<f64>() * 3.0).collect(),
            epsilon: 0.05,
            iterations: 0,
            converged: false,
            residuals: vec![],
            objective: vec![],
        };
        let plan = recover_plan(q.view(), &pot);
        for c in plan.pi.columns() {
            assert!((c.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn large_epsilon_flattens_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_square(&mut rng, 4);
        let pot = wafi_solve(q.view(), &WafiOptions { epsilon: 1e3, ..Default::default() }).unwrap();
        let plan = recover_plan(q.view(), &pot);
        assert!(plan.pi.iter().all(|&p| (p - 0.25).abs() < 1e-3));
    }

    #[test]
    fn masked_pair_wins_its_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = Array2::from_shape_fn((5, 5), |_| 0.1 + rng.random::<f64>());
        let (plan, _) = {
            let mask = GuidanceMask::new(5, &[(3, 1)]).unwrap();
            let q = apply_mask(c.view(), &mask).unwrap();
            let pot = wafi_iterate(q.view(), &WafiOptions { epsilon: 1e-3, ..Default::default() }).unwrap();
            (recover_plan(q.view(), &pot), pot)
        };
        assert_eq!(plan.column_argmax()[1], 3);
    }

    #[test]
    fn dual_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for eps in [1e-3, 1e-2, 0.1, 1.0] {
            let q = random_square(&mut rng, 6);
            let pot = wafi_iterate(q.view(), &WafiOptions { epsilon: eps, max_iters: 2000, tol: 1e-10 }).unwrap();
            for w in pot.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
            }
            assert_eq!(*pot.omega.last().unwrap(), 0.0);
        }
    }

    #[test]
    fn fixed_point_balances_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_square(&mut rng, 5);
        let pot = wafi_solve(q.view(), &WafiOptions { epsilon: 0.2, ..Default::default() }).unwrap();
        let plan = recover_plan(q.view(), &pot);
        for r in plan.pi.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn warm_start_pins_last_coordinate() {
        let q = Array2::<f64>::zeros((3, 3));
        let pot = wafi_iterate_from(q.view(), &WafiOptions::default(), vec![0.3, -0.2, 5.0]).unwrap();
        assert!(pot.converged);
        assert!(pot.omega.iter().all(|w| w.abs() < 1e-8));
        assert!(wafi_iterate_from(q.view(), &WafiOptions::default(), vec![0.0; 2]).is_err());
    }

    #[test]
    fn non_finite_cost_is_rejected() {
        let q = array![[0.0, f64::INFINITY], [1.0, 0.0]];
        assert!(wafi_solve(q.view(), &WafiOptions::default()).is_err());
    }

    #[test]
    fn budget_exhaustion_is_a_convergence_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_square(&mut rng, 6);
        let opts = WafiOptions { epsilon: 0.5, max_iters: 1, tol: 1e-14 };
        assert!(matches!(wafi_solve(q.view(), &opts), Err(Error::Convergence { .. })));
        assert!(!wafi_iterate(q.view(), &opts).unwrap().converged);
    }

    #[test]
    fn assignment_known_cases() {
        let q = array![[0.0, 1.0, 2.0], [3.0, 0.0, 1.0], [2.0, 2.0, 0.0]];
        assert_eq!(exact_assignment(q.view(), ORACLE_LIMIT).unwrap(), (vec![0, 1, 2], 0.0));
        let anti = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(exact_assignment(anti.view(), ORACLE_LIMIT).unwrap(), (vec![1, 0], 0.0));
        let big = Array2::<f64>::zeros((11, 11));
        assert!(exact_assignment(big.view(), ORACLE_LIMIT).is_err());
    }

    #[test]
    fn hungarian_agrees_with_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let q = random_square(&mut rng, 6);
            let (_, h) = hungarian(q.view());
            let (_, e) = exhaustive_assignment(q.view());
            assert!((h - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_embeddings_concentrate_on_diagonal() {
        let u = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let opts = MatchOptions {
            wafi: WafiOptions { epsilon: 1e-2, ..Default::default() },
            ..Default::default()
        };
        let (plan, _) = match_users(u.view(), u.view(), &[], &opts).unwrap();
        assert_eq!(plan.column_argmax(), vec![0, 1, 2, 3]);
        assert!((0..4).all(|i| plan.pi[[i, i]] > 0.99));
    }

    #[test]
    fn plan_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pi.tsv");
        let plan = MatchingPlan {
            pi: array![[0.75, 0.0], [0.25, 1.0]],
        };
        plan.save(&p, 0.01).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("# n=2 eps=0.01\n"));
        let (back, eps) = MatchingPlan::load(&p).unwrap();
        assert_eq!(back, plan);
        assert_eq!(eps, 0.01);
    }
}
