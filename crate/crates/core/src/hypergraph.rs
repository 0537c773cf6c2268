//! Balanced soft clustering of items into hyperedges.
//!
//! Solves
//!
//! ```text
//! min_γ  −⟨Aγ, γ⟩ + η/2 ‖γ‖²   s.t.  γ 1_K = 1,  γᵀ 1_N = N/K,  γ ≥ 0
//! ```
//!
//! by successive linearization: each outer step freezes `Y = −Aγ` and solves
//! the resulting quadratically regularized transport problem through its two
//! Lagrange multiplier families `f` (rows) and `g` (columns), each updated in
//! closed form from a sorted prefix scan.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::matching::hungarian;

const POLISH_EVERY: usize = 3;
const POLISH_BELOW: f64 = 1.0;

/// Soft item-to-cluster assignment `γ` (`N × K`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub gamma: Array2<f64>,
}

impl ClusterAssignment {
    pub fn num_items(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn num_clusters(&self) -> usize {
        self.gamma.ncols()
    }

    /// Largest deviation from unit row sums and `N/K` column sums.
    pub fn constraint_residual(&self) -> f64 {
        marginal_residual(self.gamma.view())
    }

    /// Checks non-negativity and both marginal constraints within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.gamma.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract("cluster assignment has negative or non-finite entries".into()));
        }
        let r = self.constraint_residual();
        if r > tol {
            return Err(Error::Contract(format!("cluster marginals violated by {r:e}")));
        }
        Ok(())
    }

    /// Row-wise argmax (lowest cluster index on ties).
    pub fn hard_labels(&self) -> Vec<usize> {
        self.gamma
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect()
    }

    /// Hard assignment with cluster sizes as equal as possible, maximizing total `γ` mass.
    pub fn balanced_labels(&self) -> Vec<usize> {
        let (n, k) = self.gamma.dim();
        let mut slot_cluster = Vec::with_capacity(n);
        for j in 0..k {
            let cap = n / k + usize::from(j < n % k);
            slot_cluster.extend(std::iter::repeat_n(j, cap));
        }
        let cost = Array2::from_shape_fn((n, n), |(i, s)| -self.gamma[[i, slot_cluster[s]]]);
        let (perm, _) = hungarian(cost.view());
        perm.into_iter().map(|s| slot_cluster[s]).collect()
    }

    /// One-hot matrix from hard labels.
    pub fn from_labels(labels: &[usize], k: usize) -> Self {
        let mut gamma = Array2::zeros((labels.len(), k));
        for (i, &l) in labels.iter().enumerate() {
            gamma[[i, l]] = 1.0;
        }
        ClusterAssignment { gamma }
    }

    /// Writes one row per item under `# n=<N> k=<K>`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("# n={} k={}\n", self.num_items(), self.num_clusters());
        for row in self.gamma.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        io::write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let mut lines = text.lines();
        let header = io::parse_header(path, lines.next().unwrap_or_default())?;
        let n: usize = io::header_value(path, &header, "n")?;
        let k: usize = io::header_value(path, &header, "k")?;
        let mut gamma = Array2::zeros((n, k));
        let mut rows = 0;
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 2,
                message,
            };
            if rows >= n {
                return Err(bad(format!("more than n={n} rows")));
            }
            let values: Vec<f64> = line
                .split('\t')
                .map(|c| c.trim().parse::<f64>().map_err(|_| bad(format!("bad number `{c}`"))))
                .collect::<Result<_>>()?;
            if values.len() != k {
                return Err(bad(format!("expected {k} columns, found {}", values.len())));
            }
            for (j, v) in values.into_iter().enumerate() {
                gamma[[rows, j]] = v;
            }
            rows += 1;
        }
        if rows != n {
            return Err(Error::Schema(format!("{}: expected {n} rows, found {rows}", path.display())));
        }
        Ok(ClusterAssignment { gamma })
    }
}

fn marginal_residual(gamma: ArrayView2<f64>) -> f64 {
    let (n, k) = gamma.dim();
    let col_target = n as f64 / k as f64;
    let rows = gamma
        .rows()
        .into_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let cols = gamma
        .columns()
        .into_iter()
        .map(|c| (c.sum() - col_target).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

/// Marginal residual of the plan implied by `(f, g)` without materializing it.
fn dual_residual(y: ArrayView2<f64>, f: &[f64], g: &[f64], eta: f64) -> f64 {
    let (n, k) = y.dim();
    let col_target = n as f64 / k as f64;
    let mut cols = vec![0.0; k];
    let mut worst = 0.0f64;
    for (row, &fi) in y.rows().into_iter().zip(f) {
        let mut total = 0.0;
        for ((c, &yv), &gj) in cols.iter_mut().zip(row).zip(g) {
            let v = ((fi + gj - yv) / eta).max(0.0);
            total += v;
            *c += v;
        }
        worst = worst.max((total - 1.0).abs());
    }
    cols.iter().fold(worst, |m, c| m.max((c - col_target).abs()))
}

/// Exact multipliers for the support implied by `(f, g)`.
///
/// With the active set frozen both marginal families are linear in `(f, g)`.
/// Eliminating `f` leaves a `K × K` system in `g`, whose one free shift is
/// fixed by keeping the last `g` where it is.
fn support_solve(y: ArrayView2<f64>, f: &[f64], g: &[f64], eta: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let (n, k) = y.dim();
    let col_mass = eta * n as f64 / k as f64;
    let mut m = Array2::<f64>::zeros((k, k));
    let mut rhs = vec![col_mass; k];
    let mut support: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut row_const = vec![0.0; n];
    for (i, row) in y.rows().into_iter().enumerate() {
        let active: Vec<usize> = (0..k).filter(|&j| f[i] + g[j] - row[j] > 0.0).collect();
        if active.is_empty() {
            return None;
        }
        let cnt = active.len() as f64;
        row_const[i] = (eta + active.iter().map(|&j| row[j]).sum::<f64>()) / cnt;
        for &j in &active {
            m[[j, j]] += 1.0;
            rhs[j] += row[j] - row_const[i];
            for &l in &active {
                m[[j, l]] -= 1.0 / cnt;
            }
        }
        support.push(active);
    }
    // clusters that share no item form separate blocks, each with its own free shift
    let mut parent: Vec<usize> = (0..k).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for active in &support {
        for w in active.windows(2) {
            let (a, b) = (root(&mut parent, w[0]), root(&mut parent, w[1]));
            parent[a.min(b)] = a.max(b);
        }
    }
    for j in 0..k {
        if root(&mut parent, j) == j {
            for c in 0..k {
                m[[j, c]] = 0.0;
            }
            m[[j, j]] = 1.0;
            rhs[j] = g[j];
        }
    }
    let g_new = crate::linalg::solve_dense(m, rhs)?;
    let f_new = support
        .iter()
        .zip(&row_const)
        .map(|(active, c)| c - active.iter().map(|&j| g_new[j]).sum::<f64>() / active.len() as f64)
        .collect();
    Some((f_new, g_new))
}

/// Solves `Σ_o [x − c_o]₊ = mass` for `x` by scanning sorted thresholds.
///
/// With `c` sorted ascending, the answer is the first prefix average
/// `(mass + Σ_{o≤κ} c_o)/κ` that lands in `[c_κ, c_{κ+1})`.
pub fn solve_hinge_mass(thresholds: &mut [f64], mass: f64) -> f64 {
    let n = thresholds.len();
    assert!(n > 0, "empty threshold set");
    // only a short ascending prefix is ever active, so sort just that much and grow on demand
    let mut sorted = 0;
    let mut want = n.min(32);
    let mut prefix = 0.0;
    let mut kappa = 0;
    loop {
        if want < n {
            thresholds[sorted..].select_nth_unstable_by(want - sorted, f64::total_cmp);
        }
        thresholds[sorted..want].sort_by(f64::total_cmp);
        sorted = want;
        while kappa < sorted {
            prefix += thresholds[kappa];
            kappa += 1;
            let candidate = (mass + prefix) / kappa as f64;
            if kappa == n {
                return candidate;
            }
            if kappa < sorted && candidate < thresholds[kappa] {
                return candidate;
            }
            if kappa == sorted {
                // the next threshold is the minimum of the unsorted tail
                let next = thresholds[sorted..].iter().copied().fold(f64::INFINITY, f64::min);
                if candidate < next {
                    return candidate;
                }
            }
        }
        want = (want * 2).min(n);
    }
}

/// Row multipliers: `Σ_j [f_i − (Y_ij − g_j)]₊ = η` for every row.
pub fn update_f(y: ArrayView2<f64>, g: &[f64], eta: f64) -> Vec<f64> {
    let mut buf = vec![0.0; y.ncols()];
    y.rows()
        .into_iter()
        .map(|row| {
            for ((b, &yv), &gv) in buf.iter_mut().zip(row).zip(g) {
                *b = yv - gv;
            }
            solve_hinge_mass(&mut buf, eta)
        })
        .collect()
}

/// Column multipliers: `Σ_i [g_j − (Y_ij − f_i)]₊ = η·N/K` for every column.
pub fn update_g(y: ArrayView2<f64>, f: &[f64], eta: f64) -> Vec<f64> {
    let (n, k) = y.dim();
    let mass = eta * n as f64 / k as f64;
    let mut buf = vec![0.0; n];
    y.columns()
        .into_iter()
        .map(|col| {
            for ((b, &yv), &fv) in buf.iter_mut().zip(col).zip(f) {
                *b = yv - fv;
            }
            solve_hinge_mass(&mut buf, mass)
        })
        .collect()
}

/// `γ_ij = [(f_i + g_j − Y_ij)/η]₊` (marginals not checked).
pub fn assemble_gamma(y: ArrayView2<f64>, f: &[f64], g: &[f64], eta: f64) -> ClusterAssignment {
    let gamma = Array2::from_shape_fn(y.dim(), |(i, j)| ((f[i] + g[j] - y[[i, j]]) / eta).max(0.0));
    ClusterAssignment { gamma }
}

/// `−⟨Aγ, γ⟩ + η/2 ‖γ‖²`.
pub fn sishe_objective(a: ArrayView2<f64>, gamma: ArrayView2<f64>, eta: f64) -> f64 {
    let ag = a.dot(&gamma);
    let inner: f64 = ag.iter().zip(gamma.iter()).map(|(x, y)| x * y).sum();
    let sq: f64 = gamma.iter().map(|v| v * v).sum();
    -inner + 0.5 * eta * sq
}

#[derive(Debug, Clone, PartialEq)]
pub struct SisheOptions {
    pub num_clusters: usize,
    pub eta: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub tol: f64,
    /// Seeds the tiny perturbation that breaks the cluster-permutation symmetry
    /// of the uniform starting point.
    pub seed: u64,
}

impl Default for SisheOptions {
    fn default() -> Self {
        SisheOptions {
            num_clusters: 15,
            eta: 0.1,
            outer_iters: 50,
            inner_iters: 200,
            tol: 1e-10,
            seed: 0,
        }
    }
}

/// Multipliers and inner-loop bookkeeping of the last outer iteration.
#[derive(Debug, Clone)]
pub struct SisheTrace {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// The frozen linear term of the last outer iteration.
    pub y: Array2<f64>,
    pub outer_iterations: usize,
    pub inner_iterations: Vec<usize>,
    pub objective: Vec<f64>,
}

/// Runs the double loop from `γ = 1/K` and returns an assignment satisfying
/// both marginal constraints within `tol`.
/// Moves from `gamma` toward `target` by the step in [0, 1] that minimizes the
/// objective along the segment. Both endpoints are feasible, so the result is too.
fn damped_step(a: ArrayView2<f64>, gamma: &Array2<f64>, target: Array2<f64>, eta: f64) -> Array2<f64> {
    let d = &target - gamma;
    let ad = a.dot(&d);
    let dot = |x: &Array2<f64>, y: &Array2<f64>| -> f64 { x.iter().zip(y.iter()).map(|(p, q)| p * q).sum() };
    // objective(γ + τd) - objective(γ) = bτ + cτ²
    let b = -2.0 * dot(&ad, gamma) + eta * dot(gamma, &d);
    let c = -dot(&ad, &d) + 0.5 * eta * dot(&d, &d);
    let tau = if c > 0.0 {
        (-b / (2.0 * c)).clamp(0.0, 1.0)
    } else if b + c < 0.0 {
        1.0
    } else {
        0.0
    };
    if tau == 1.0 {
        target
    } else {
        gamma + &(d * tau)
    }
}

pub fn sishe_cluster(a: ArrayView2<f64>, opts: &SisheOptions) -> Result<ClusterAssignment> {
    sishe_cluster_traced(a, opts).map(|(c, _)| c)
}

pub fn sishe_cluster_traced(a: ArrayView2<f64>, opts: &SisheOptions) -> Result<(ClusterAssignment, SisheTrace)> {
    let n = a.nrows();
    let k = opts.num_clusters;
    if a.ncols() != n {
        return Err(Error::ShapeMismatch(format!("graph must be square, got {:?}", a.dim())));
    }
    if k < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 clusters, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidParameter(format!("{k} clusters for {n} items")));
    }
    if !(opts.eta > 0.0) {
        return Err(Error::InvalidParameter(format!("eta must be positive, got {}", opts.eta)));
    }

    let mut gamma = Array2::from_elem((n, k), 1.0 / k as f64);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; k];
    let mut trace = SisheTrace {
        f: Vec::new(),
        g: Vec::new(),
        y: Array2::zeros((n, k)),
        outer_iterations: 0,
        inner_iterations: Vec::new(),
        objective: vec![sishe_objective(a, gamma.view(), opts.eta)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut residual = marginal_residual(gamma.view());

    for outer in 0..opts.outer_iters {
        let mut y = a.dot(&gamma);
        y.mapv_inplace(|v| -v);
        if outer == 0 {
            // γ = 1/K makes every column of Y identical, which the exact
            // inner solve would reproduce forever.
            let scale = 1e-6 * (1.0 + y.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            y.mapv_inplace(|v| v + scale * (rng.random::<f64>() - 0.5));
        }
        // column-major copy keeps the g-update on contiguous memory
        let yt = y.t().as_standard_layout().into_owned();
        let mut inner = 0;
        while inner < opts.inner_iters {
            inner += 1;
            f = update_f(y.view(), &g, opts.eta);
            g = update_g(yt.t(), &f, opts.eta);
            residual = dual_residual(y.view(), &f, &g, opts.eta);
            if residual < opts.tol {
                break;
            }
            // once the support settles, jump to its exact multipliers and
            // keep the jump only if a regular sweep from there does better
            if inner % POLISH_EVERY == 0 && residual < POLISH_BELOW {
                if let Some((_, g_jump)) = support_solve(y.view(), &f, &g, opts.eta) {
                    let f_try = update_f(y.view(), &g_jump, opts.eta);
                    let g_try = update_g(yt.t(), &f_try, opts.eta);
                    let r_try = dual_residual(y.view(), &f_try, &g_try, opts.eta);
                    if r_try < residual {
                        f = f_try;
                        g = g_try;
                        residual = r_try;
                        if residual < opts.tol {
                            break;
                        }
                    }
                }
            }
        }
        let target = assemble_gamma(y.view(), &f, &g, opts.eta).gamma;
        let next = if outer == 0 { target } else { damped_step(a, &gamma, target, opts.eta) };
        let change = next
            .iter()
            .zip(gamma.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        gamma = next;
        trace.y = y;
        trace.outer_iterations = outer + 1;
        trace.inner_iterations.push(inner);
        trace.objective.push(sishe_objective(a, gamma.view(), opts.eta));
        if change < opts.tol && residual < opts.tol {
            break;
        }
    }
    if residual >= opts.tol {
        return Err(Error::Convergence {
            what: "balanced hypergraph clustering",
            iterations: trace.outer_iterations,
            residual,
        });
    }
    trace.f = f;
    trace.g = g;
    Ok((ClusterAssignment { gamma }, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Bisection on the monotone hinge sum, independent of the sorted scan.
    fn bisect_hinge(c: &[f64], mass: f64) -> f64 {
        let phi = |x: f64| c.iter().map(|&ci| (x - ci).max(0.0)).sum::<f64>();
        let mut lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut hi = lo + mass + c.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi(mid) < mass {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn update_f_single_cluster() {
        let y = array![[3.0], [-1.0]];
        let f = update_f(y.view(), &[0.5], 0.2);
        assert!((f[0] - (0.2 + 2.5)).abs() < 1e-15);
        assert!((f[1] - (0.2 - 1.5)).abs() < 1e-15);
    }

    #[test]
    fn update_f_matches_bisection() {
        let y = array![[0.0, 0.0], [0.0, 10.0]];
        let f = update_f(y.view(), &[0.0, 0.0], 1.0);
        assert!((f[0] - 0.5).abs() < 1e-12);
        assert!((f[0] - bisect_hinge(&[0.0, 0.0], 1.0)).abs() < 1e-9);
        assert!((f[1] - 1.0).abs() < 1e-12);
        assert!((f[1] - bisect_hinge(&[0.0, 10.0], 1.0)).abs() < 1e-9);
    }

    #[test]
    fn update_g_matches_bisection() {
        // mass η·N/K = 2 spread over four equal thresholds
        let y = Array2::<f64>::zeros((4, 2));
        let g = update_g(y.view(), &[0.0; 4], 1.0);
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((g[0] - bisect_hinge(&[0.0; 4], 2.0)).abs() < 1e-9);

        let y = array![[-100.0, 0.0], [0.0, 0.0]];
        let g = update_g(y.view(), &[0.0, 0.0], 1.0);
        assert!((g[0] - bisect_hinge(&[-100.0, 0.0], 1.0)).abs() < 1e-9);
        assert!((g[0] - (-99.0)).abs() < 1e-12);
    }

    #[test]
    fn update_g_with_n_equal_k_mirrors_update_f() {
        let y = array![[0.3, -0.2], [1.1, 0.4]];
        let f = [0.1, -0.3];
        let g = update_g(y.view(), &f, 0.7);
        let gt = update_f(y.t(), &f, 0.7);
        assert_eq!(g, gt);
    }

    #[test]
    fn hinge_solution_satisfies_equation() {
        let c = [0.3, -1.2, 2.5, 0.0, 0.9];
        for mass in [0.01, 0.5, 3.0, 40.0] {
            let x = solve_hinge_mass(&mut c.to_vec(), mass);
            let phi: f64 = c.iter().map(|&ci| (x - ci).max(0.0)).sum();
            assert!((phi - mass).abs() < 1e-12, "mass {mass}: {phi}");
        }
    }

    #[test]
    fn assemble_gamma_hinge_and_scaling() {
        let y = array![[1.0, 2.0], [3.0, 4.0]];
        let zero = assemble_gamma(y.view(), &[0.0, 0.0], &[0.0, 0.0], 1.0);
        assert!(zero.gamma.iter().all(|&v| v == 0.0));
        let f = [5.0, 6.0];
        let g = [0.5, -0.5];
        let one = assemble_gamma(y.view(), &f, &g, 1.0);
        let quarter = assemble_gamma(y.view(), &f, &g, 0.25);
        for (a, b) in one.gamma.iter().zip(quarter.gamma.iter()) {
            assert!((a / 0.25 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_closed_forms() {
        let n = 6;
        let k = 3;
        let eta = 0.3;
        let a = Array2::<f64>::ones((n, n));
        let zero = Array2::<f64>::zeros((n, k));
        assert_eq!(sishe_objective(a.view(), zero.view(), eta), 0.0);
        let uniform = Array2::from_elem((n, k), 1.0 / k as f64);
        let expected = -((n * n) as f64) / k as f64 + eta * n as f64 / (2.0 * k as f64);
        assert!((sishe_objective(a.view(), uniform.view(), eta) - expected).abs() < 1e-12);

        let block = array![
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0, 1.0]
        ];
        let hard = ClusterAssignment::from_labels(&[0, 0, 1, 1], 2);
        let v = sishe_objective(block.view(), hard.gamma.view(), 0.01);
        assert!((v - (-8.0 + 0.005 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn initial_gamma_is_uniform() {
        let a = Array2::<f64>::ones((4, 4));
        let opts = SisheOptions {
            num_clusters: 2,
            outer_iters: 0,
            ..Default::default()
        };
        let c = sishe_cluster(a.view(), &opts).unwrap();
        assert!(c.gamma.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn block_diagonal_graph_splits_blocks() {
        let a = array![
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0, 1.0]
        ];
        let opts = SisheOptions {
            num_clusters: 2,
            eta: 0.01,
            ..Default::default()
        };
        let c = sishe_cluster(a.view(), &opts).unwrap();
        c.validate(1e-6).unwrap();
        let l = c.hard_labels();
        assert_eq!(l[0], l[1]);
        assert_eq!(l[2], l[3]);
        assert_ne!(l[0], l[2]);
    }

    #[test]
    fn all_ones_graph_only_constraints_checkable() {
        let a = Array2::<f64>::ones((6, 6));
        let opts = SisheOptions {
            num_clusters: 3,
            eta: 0.1,
            ..Default::default()
        };
        let c = sishe_cluster(a.view(), &opts).unwrap();
        c.validate(opts.tol).unwrap();
    }

    #[test]
    fn replayed_multipliers_reproduce_gamma() {
        let a = array![
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0, 1.0]
        ];
        let opts = SisheOptions {
            num_clusters: 2,
            eta: 0.01,
            ..Default::default()
        };
        let (c, trace) = sishe_cluster_traced(a.view(), &opts).unwrap();
        let replay = assemble_gamma(trace.y.view(), &trace.f, &trace.g, opts.eta);
        assert_eq!(replay, c);
    }

    #[test]
    fn rejects_bad_parameters() {
        let a = Array2::<f64>::ones((3, 3));
        let mut opts = SisheOptions {
            num_clusters: 4,
            ..Default::default()
        };
        assert!(sishe_cluster(a.view(), &opts).is_err());
        opts.num_clusters = 1;
        assert!(sishe_cluster(a.view(), &opts).is_err());
        opts.num_clusters = 2;
        opts.eta = 0.0;
        assert!(sishe_cluster(a.view(), &opts).is_err());
        let rect = Array2::<f64>::ones((3, 2));
        assert!(sishe_cluster(rect.view(), &SisheOptions::default()).is_err());
    }

    #[test]
    fn non_divisible_sizes_use_real_column_mass() {
        let a = Array2::from_shape_fn((7, 7), |(i, j)| if (i < 4) == (j < 4) { 1.0 } else { 0.1 });
        let opts = SisheOptions {
            num_clusters: 2,
            eta: 0.05,
            ..Default::default()
        };
        let c = sishe_cluster(a.view(), &opts).unwrap();
        for col in c.gamma.columns() {
            assert!((col.sum() - 3.5).abs() < 1e-6);
        }
    }

    #[test]
    fn gamma_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gamma.tsv");
        let c = ClusterAssignment {
            gamma: array![[0.25, 0.75], [0.75, 0.25]],
        };
        c.save(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("# n=2 k=2\n"));
        assert_eq!(ClusterAssignment::load(&p).unwrap(), c);
    }

    #[test]
    fn balanced_labels_respect_capacities() {
        let c = ClusterAssignment {
            gamma: array![[0.9, 0.1], [0.8, 0.2], [0.7, 0.3], [0.4, 0.6]],
        };
        let l = c.balanced_labels();
        assert_eq!(l.iter().filter(|&&x| x == 0).count(), 2);
        assert_eq!(l, vec![0, 0, 1, 1]);
    }
}
