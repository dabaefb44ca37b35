//! Dense numerical routines shared by the encoders and learners.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernels::{max_asymmetry, symmetric_from_fn};

/// Default relative eigenvalue truncation threshold.
pub const DEFAULT_TAU: f64 = 1e-10;

/// Condition number beyond which a ridge-regularized system is singular.
pub const MAX_CONDITION: f64 = 1e14;

/// Truncated eigen-factorization `K ~ U diag(sigma) U'` of a symmetric
/// positive semi-definite matrix.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    /// `N x r`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Retained eigenvalues, descending.
    pub sigma: DVector<f64>,
    pub tau: f64,
}

impl PsdFactor {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(sigma) U'`, exactly symmetric.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let us = &self.u * DMatrix::from_diagonal(&self.sigma);
        symmetric_from_fn(self.u.nrows(), |i, j| us.row(i).dot(&self.u.row(j)))
    }

    /// Orthogonal projector `U U'` onto the retained eigenspace.
    pub fn projector(&self) -> DMatrix<f64> {
        symmetric_from_fn(self.u.nrows(), |i, j| self.u.row(i).dot(&self.u.row(j)))
    }

    /// `A = diag(sigma)^{1/2} U'`, so that `A'A` reconstructs the input.
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.sigma.map(f64::sqrt)) * self.u.transpose()
    }

    /// `diag(sigma)^{-1/2} U' v`; for `v = k(x, D)` this is the transformed
    /// query of the equivalent vector-space sparse coding problem.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut t = self.u.tr_mul(v);
        for (ti, s) in t.iter_mut().zip(self.sigma.iter()) {
            *ti /= s.sqrt();
        }
        t
    }
}

/// Eigen-factorization of a symmetric matrix keeping eigenpairs with
/// `lambda >= tau * lambda_max`. Negative eigenvalues are discarded.
pub fn psd_factor(k: &DMatrix<f64>, tau: f64) -> Result<PsdFactor> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "psd_factor expects a square matrix",
            expected: n,
            found: k.ncols(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("psd_factor on an empty matrix"));
    }
    let asym = max_asymmetry(k);
    if asym > 1e-10 * k.amax().max(1.0) {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    let eig = SymmetricEigen::new(k.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]];
    if !(lmax > 0.0) {
        return Err(Error::DegenerateGram);
    }
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] >= tau * lmax && eig.eigenvalues[i] > 0.0)
        .collect();
    let u = eig.eigenvectors.select_columns(&keep);
    let sigma = DVector::from_iterator(keep.len(), keep.iter().map(|&i| eig.eigenvalues[i]));
    Ok(PsdFactor { u, sigma, tau })
}

#[derive(Debug, Clone)]
pub struct LassoOptions {
    pub max_sweeps: usize,
    /// Converged once the largest coordinate change of a sweep drops below this.
    pub tol: f64,
    /// Re-solve the reduced system on the detected support and keep it when
    /// it satisfies the optimality conditions with a lower objective.
    pub polish: bool,
    pub record_trace: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            max_sweeps: 10_000,
            tol: 1e-10,
            polish: true,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub y: DVector<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after each sweep (only with `record_trace`).
    pub trace: Vec<f64>,
}

/// `y'Qy - 2b'y + gamma |y|_1`
pub fn lasso_objective(q: &DMatrix<f64>, b: &DVector<f64>, gamma: f64, y: &DVector<f64>) -> f64 {
    y.dot(&(q * y)) - 2.0 * b.dot(y) + gamma * y.lp_norm(1)
}

/// Largest violation of the subgradient optimality conditions of
/// `min_y y'Qy - 2b'y + gamma |y|_1`.
pub fn lasso_kkt_violation(q: &DMatrix<f64>, b: &DVector<f64>, gamma: f64, y: &DVector<f64>) -> f64 {
    let g = 2.0 * (q * y - b);
    g.iter()
        .zip(y.iter())
        .map(|(&gj, &yj)| {
            if yj == 0.0 {
                (gj.abs() - gamma).max(0.0)
            } else {
                (gj + gamma * yj.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Solves `min_y y'Qy - 2b'y + gamma |y|_1` by cyclic coordinate descent
/// with soft-thresholding.
pub fn lasso_solve(q: &DMatrix<f64>, b: &DVector<f64>, gamma: f64) -> Result<DVector<f64>> {
    lasso_solve_with(q, b, gamma, &LassoOptions::default()).map(|s| s.y)
}

pub fn lasso_solve_with(
    q: &DMatrix<f64>,
    b: &DVector<f64>,
    gamma: f64,
    opts: &LassoOptions,
) -> Result<LassoSolution> {
    let n = b.len();
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "lasso Q vs b",
            expected: n,
            found: q.nrows(),
        });
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("lasso gamma {gamma} must be >= 0")));
    }
    let half_gamma = 0.5 * gamma;
    let mut y = DVector::zeros(n);
    let mut trace = Vec::new();
    let mut sweeps = 0;
    let mut converged = n == 0;

    while !converged && sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut qy = q * &y;
        let mut max_change = 0.0f64;
        for j in 0..n {
            let qjj = q[(j, j)];
            let r = b[j] - (qy[j] - qjj * y[j]);
            let next = if qjj > 0.0 {
                soft_threshold(r, half_gamma) / qjj
            } else if qjj == 0.0 && r.abs() <= half_gamma {
                0.0
            } else {
                return Err(Error::NonConvex { coordinate: j, diagonal: qjj });
            };
            let delta = next - y[j];
            if delta != 0.0 {
                y[j] = next;
                qy.axpy(delta, &q.column(j), 1.0);
                max_change = max_change.max(delta.abs());
            }
        }
        if opts.record_trace {
            trace.push(lasso_objective(q, b, gamma, &y));
        }
        converged = max_change < opts.tol;
    }

    if opts.polish {
        if let Some(p) = polish_support(q, b, gamma, &y) {
            y = p;
        }
    }
    Ok(LassoSolution { y, sweeps, converged, trace })
}

/// Exact solution of the quadratic restricted to the support and signs of `y`,
/// returned only when it is sign-consistent, optimal, and no worse.
fn polish_support(q: &DMatrix<f64>, b: &DVector<f64>, gamma: f64, y: &DVector<f64>) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..y.len()).filter(|&j| y[j] != 0.0).collect();
    if support.is_empty() {
        return None;
    }
    let qs = q.select_rows(&support).select_columns(&support);
    let rhs = DVector::from_iterator(
        support.len(),
        support.iter().map(|&j| b[j] - 0.5 * gamma * y[j].signum()),
    );
    let z = qs.cholesky()?.solve(&rhs);
    let mut cand = DVector::zeros(y.len());
    for (k, &j) in support.iter().enumerate() {
        if z[k].signum() != y[j].signum() || z[k] == 0.0 || !z[k].is_finite() {
            return None;
        }
        cand[j] = z[k];
    }
    let scale = 1.0 + b.amax() + gamma;
    if lasso_kkt_violation(q, b, gamma, &cand) > 1e-12 * scale {
        return None;
    }
    let before = lasso_objective(q, b, gamma, y);
    let after = lasso_objective(q, b, gamma, &cand);
    (after <= before).then_some(cand)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `1e-8 * trace(G) / N`, the ridge used by the learning loops.
pub fn default_ridge(g: &DMatrix<f64>) -> f64 {
    if g.nrows() == 0 {
        return 0.0;
    }
    1e-8 * g.trace() / g.nrows() as f64
}

/// Solves `(G + eps I) Z = B` for symmetric `G`.
pub fn ridge_solve(g: &DMatrix<f64>, rhs: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    if g.ncols() != n || rhs.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "ridge_solve system vs right-hand side",
            expected: n,
            found: rhs.nrows(),
        });
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter(format!("ridge {eps} must be >= 0")));
    }
    let mut sys = g.clone();
    for i in 0..n {
        sys[(i, i)] += eps;
    }

    if let Some(chol) = sys.clone().cholesky() {
        let l = chol.l_dirty();
        let diag = (0..n).map(|i| l[(i, i)]);
        let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let condition = (hi / lo).powi(2);
        if condition > MAX_CONDITION {
            return Err(Error::Singular { condition });
        }
        let mut z = chol.solve(rhs);
        let residual = rhs - &sys * &z;
        z += chol.solve(&residual);
        return Ok(z);
    }

    let eig = SymmetricEigen::new(sys.clone());
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let hi = abs.iter().cloned().fold(0.0, f64::max);
    let lo = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let apply = |r: &DMatrix<f64>| {
        let mut t = eig.eigenvectors.tr_mul(r);
        for (i, lam) in eig.eigenvalues.iter().enumerate() {
            t.row_mut(i).scale_mut(1.0 / lam);
        }
        &eig.eigenvectors * t
    };
    let mut z = apply(rhs);
    let residual = rhs - &sys * &z;
    z += apply(&residual);
    Ok(z)
}

/// `((Y Y' + eps I)^{-1} Y)'`, an `M x N` matrix for an `N x M` input.
pub fn pseudo_inverse(y: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let gram = y * y.transpose();
    let gram = symmetric_from_fn(gram.nrows(), |i, j| gram[(i, j)]);
    Ok(ridge_solve(&gram, y, eps)?.transpose())
}

/// Minimum-norm solution of `H z = r` for symmetric PSD `H`, through the
/// truncated eigen-factorization.
pub fn psd_pseudo_solve(h: &DMatrix<f64>, rhs: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let f = psd_factor(h, tau)?;
    let mut t = f.u.tr_mul(rhs);
    for (i, s) in f.sigma.iter().enumerate() {
        t.row_mut(i).scale_mut(1.0 / s);
    }
    Ok(&f.u * t)
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    let mut sorted: Vec<f64> = v.iter().cloned().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - 1.0) / (k + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    let mut p = v.map(|x| (x - theta).max(0.0));
    let total: f64 = p.sum();
    if total > 0.0 && n > 0 {
        p /= total;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, rank: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = DMatrix::from_fn(rank, n, |_, _| rng.random_range(-1.0..1.0));
        let g = f.transpose() * f;
        symmetric_from_fn(n, |i, j| g[(i, j)])
    }

    #[test]
    fn factor_of_identity() {
        let f = psd_factor(&DMatrix::identity(3, 3), 1e-10).unwrap();
        assert_eq!(f.sigma.as_slice(), &[1.0, 1.0, 1.0]);
        assert_relative_eq!(f.u.transpose() * &f.u, DMatrix::identity(3, 3), epsilon = 1e-14);
        assert_relative_eq!(f.u.abs().column_sum(), DVector::from_element(3, 1.0), epsilon = 1e-14);
    }

    #[test]
    fn factor_of_rank_one() {
        let k = DMatrix::from_element(2, 2, 1.0);
        let f = psd_factor(&k, 1e-10).unwrap();
        assert_eq!(f.rank(), 1);
        assert_relative_eq!(f.sigma[0], 2.0, epsilon = 1e-14);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(f.u[(0, 0)].abs(), s, epsilon = 1e-14);
        assert_relative_eq!(f.u[(0, 0)], f.u[(1, 0)], epsilon = 1e-14);
    }

    #[test]
    fn factor_reconstructs_random_psd() {
        let k = random_psd(8, 8, 2);
        let f = psd_factor(&k, 1e-10).unwrap();
        assert!((f.reconstruct() - &k).amax() <= 1e-10);
        let a = f.sqrt_factor();
        assert!((a.transpose() * a - &k).amax() <= 1e-10);
        assert!((f.u.transpose() * &f.u - DMatrix::identity(8, 8)).amax() <= 1e-10);
    }

    #[test]
    fn factor_errors() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(psd_factor(&asym, 1e-10), Err(Error::NotSymmetric { .. })));
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        assert!(matches!(psd_factor(&neg, 1e-10), Err(Error::DegenerateGram)));
        let f = psd_factor(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0])), 1e-10).unwrap();
        assert_eq!(f.rank(), 1);
    }

    #[test]
    fn lasso_null_solution() {
        let q = random_psd(4, 4, 3);
        let b = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.05]);
        let y = lasso_solve(&q, &b, 2.0 * b.amax()).unwrap();
        assert_eq!(y, DVector::zeros(4));
    }

    #[test]
    fn lasso_separable_soft_threshold() {
        let y = lasso_solve(&DMatrix::identity(2, 2), &DVector::from_vec(vec![1.0, 0.1]), 0.4).unwrap();
        assert_relative_eq!(y, DVector::from_vec(vec![0.8, 0.0]), epsilon = 1e-15);
    }

    #[test]
    fn lasso_rejects_negative_curvature() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(lasso_solve(&q, &b, 0.1), Err(Error::NonConvex { coordinate: 1, .. })));
    }

    #[test]
    fn lasso_objective_trace_is_monotone() {
        let q = random_psd(6, 3, 4);
        let b = DVector::from_vec(vec![0.5, -0.1, 0.9, 0.2, -0.7, 0.3]);
        let opts = LassoOptions { record_trace: true, polish: false, ..Default::default() };
        let sol = lasso_solve_with(&q, &b, 0.05, &opts).unwrap();
        for w in sol.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-14 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn lasso_kkt_holds_on_random_problems() {
        for seed in 0..20 {
            let q = random_psd(7, 5 + (seed as usize % 3), 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Keep b in the range of Q; otherwise the problem is unbounded below.
            let b = &q * DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
            let sol = lasso_solve_with(&q, &b, 0.2, &LassoOptions::default()).unwrap();
            let v = lasso_kkt_violation(&q, &b, 0.2, &sol.y);
            assert!(v <= 1e-8, "seed {seed}: {v} after {} sweeps, converged {}", sol.sweeps, sol.converged);
        }
    }

    #[test]
    fn ridge_examples() {
        let b = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ridge_solve(&DMatrix::identity(2, 2), &b, 0.0).unwrap(), b);
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let z = ridge_solve(&g, &DMatrix::from_element(2, 1, 1.0), 1.0).unwrap();
        assert_relative_eq!(z[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(z[(1, 0)], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn ridge_residual_on_random_spd() {
        let g = random_psd(6, 6, 7) + DMatrix::identity(6, 6) * 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let z = ridge_solve(&g, &b, 0.0).unwrap();
        assert!((&g * z - &b).amax() <= 1e-8 * b.amax());
    }

    #[test]
    fn ridge_handles_indefinite_and_singular() {
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0]));
        let z = ridge_solve(&g, &DMatrix::from_element(2, 1, 1.0), 0.0).unwrap();
        assert_relative_eq!(z[(1, 0)], -1.0, epsilon = 1e-15);
        let s = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            ridge_solve(&s, &DMatrix::from_element(2, 1, 1.0), 0.0),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn pseudo_inverse_examples() {
        assert_relative_eq!(
            pseudo_inverse(&DMatrix::identity(3, 3), 0.0).unwrap(),
            DMatrix::identity(3, 3),
            epsilon = 1e-15
        );
        let y = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = pseudo_inverse(&y, 1e-8).unwrap();
        assert_relative_eq!(p, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]), epsilon = 1e-8);
    }

    #[test]
    fn pseudo_inverse_stationarity_and_penrose_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = DMatrix::from_fn(4, 10, |_, _| rng.random_range(-1.0..1.0));
        let p = pseudo_inverse(&y, 0.0).unwrap();
        assert_eq!(p.shape(), (10, 4));
        let at = p.transpose();
        assert!((2.0 * &y - 2.0 * &y * y.transpose() * &at).amax() <= 1e-8);
        let yp = &y * &p;
        let py = &p * &y;
        assert!((&yp * &y - &y).amax() <= 1e-8);
        assert!((&py * &p - &p).amax() <= 1e-8);
        assert!((&yp - yp.transpose()).amax() <= 1e-8);
        assert!((&py - py.transpose()).amax() <= 1e-8);
    }

    #[test]
    fn simplex_projection() {
        let p = project_simplex(&DVector::from_vec(vec![0.2, 0.2, 0.6]));
        assert_relative_eq!(p, DVector::from_vec(vec![0.2, 0.2, 0.6]), epsilon = 1e-15);
        let p = project_simplex(&DVector::from_vec(vec![3.0, -1.0]));
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn simplex_projection_is_feasible(v in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
            let p = project_simplex(&DVector::from_vec(v));
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn lasso_output_is_optimal(seed in 0u64..500, gamma in 0.0f64..1.0) {
            let q = random_psd(5, 5, seed) + DMatrix::identity(5, 5) * 0.05;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let b = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let y = lasso_solve(&q, &b, gamma).unwrap();
            prop_assert!(lasso_kkt_violation(&q, &b, gamma, &y) <= 1e-8);
        }
    }
}
