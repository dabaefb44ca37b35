//! Dictionary learning in feature space.
//!
//! Atoms are kept as combinations of mapped training samples,
//! `Phi(D) = Phi(X) A`, so every quantity the coders need follows from the
//! training Gram `K(X, X)` and the `M x N` coefficient matrix `A`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use serde::Serialize;

use crate::coders::{coding_objective, encode_batch, CodeMatrix, CodingParams, Scheme};
use crate::error::{Error, Result};
use crate::kernels::{dual_gram, gram_self, symmetric_from_fn, GramBundle, KernelSpec, Samples};
use crate::numerics::{pseudo_inverse, ridge_solve};
use crate::synth::rng;

/// Condition number of `Y Y'` above which the update switches to a ridge.
pub const UPDATE_CONDITION_LIMIT: f64 = 1e12;

/// Relative ridge used once `Y Y'` is ill-conditioned.
pub const UPDATE_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum Atoms {
    /// Atoms given directly.
    Explicit(Samples),
    /// `M x N` coefficients over the training set.
    Dual(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualDictionary {
    pub atoms: Atoms,
    /// Class label of each atom, used by the residual classifier.
    pub atom_labels: Option<Vec<usize>>,
}

impl DualDictionary {
    pub fn explicit(atoms: Samples) -> Self {
        DualDictionary { atoms: Atoms::Explicit(atoms), atom_labels: None }
    }

    pub fn dual(a: DMatrix<f64>) -> Self {
        DualDictionary { atoms: Atoms::Dual(a), atom_labels: None }
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch {
                context: "atom labels vs atoms",
                expected: self.len(),
                found: labels.len(),
            });
        }
        self.atom_labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        match &self.atoms {
            Atoms::Explicit(s) => s.len(),
            Atoms::Dual(a) => a.ncols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The coefficient matrix of a dual dictionary.
    pub fn coefficients(&self) -> Option<&DMatrix<f64>> {
        match &self.atoms {
            Atoms::Dual(a) => Some(a),
            Atoms::Explicit(_) => None,
        }
    }

    /// Kernel values between the atoms and `queries`. `train` is the set the
    /// coefficients of a dual dictionary refer to; it is ignored otherwise.
    pub fn bundle(&self, spec: &KernelSpec, train: &Samples, queries: &Samples) -> Result<GramBundle> {
        match &self.atoms {
            Atoms::Explicit(d) => GramBundle::explicit(spec, d, queries),
            Atoms::Dual(a) => dual_gram(spec, train, a, queries),
        }
    }
}

/// Dual dictionary selecting `n` distinct training samples.
pub fn init_dictionary(m: usize, n: usize, seed: u64) -> Result<DualDictionary> {
    if n == 0 || n > m {
        return Err(Error::InvalidParameter(format!(
            "cannot pick {n} atoms from {m} training samples"
        )));
    }
    let picks = index::sample(&mut rng(seed), m, n);
    let mut a = DMatrix::zeros(m, n);
    for (j, i) in picks.iter().enumerate() {
        a[(i, j)] = 1.0;
    }
    Ok(DualDictionary::dual(a))
}

/// Result of a closed-form dictionary update.
#[derive(Debug, Clone)]
pub struct DictionaryUpdate {
    /// `M x N`
    pub a: DMatrix<f64>,
    /// Ridge added to `Y Y'`; zero when it was well-conditioned.
    pub ridge: f64,
}

/// `A = Y'(Y Y')^{-1}`, the minimizer of the reconstruction term for fixed
/// codes. Falls back to a small ridge when `Y Y'` is ill-conditioned.
pub fn update_dictionary(y: &DMatrix<f64>) -> Result<DictionaryUpdate> {
    let gram = y * y.transpose();
    let gram = symmetric_from_fn(gram.nrows(), |i, j| gram[(i, j)]);
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > 0.0) {
        return Err(Error::DegenerateGram);
    }
    let ridge = if lo > 0.0 && hi / lo <= UPDATE_CONDITION_LIMIT {
        0.0
    } else {
        UPDATE_RIDGE * gram.trace() / gram.nrows() as f64
    };
    let a = ridge_solve(&gram, y, ridge)?.transpose();
    Ok(DictionaryUpdate { a, ridge })
}

/// [`update_dictionary`] with a fixed ridge; `eps = 0` errors on a
/// rank-deficient `Y Y'`.
pub fn update_dictionary_with(y: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    pseudo_inverse(y, eps)
}

/// Zeroes every code entry outside its local support, then updates.
pub fn update_dictionary_llc(codes: &CodeMatrix) -> Result<DictionaryUpdate> {
    update_dictionary(&masked_codes(codes)?)
}

pub fn masked_codes(codes: &CodeMatrix) -> Result<DMatrix<f64>> {
    let Some(supports) = &codes.supports else {
        return Ok(codes.y.clone());
    };
    if supports.len() != codes.samples() {
        return Err(Error::DimensionMismatch {
            context: "supports vs codes",
            expected: codes.samples(),
            found: supports.len(),
        });
    }
    let mut y = DMatrix::zeros(codes.atoms(), codes.samples());
    for (i, s) in supports.iter().enumerate() {
        for &j in s {
            y[(j, i)] = codes.y[(j, i)];
        }
    }
    Ok(y)
}

/// Atoms whose code row is identically zero.
pub fn dead_atoms(y: &DMatrix<f64>) -> Vec<usize> {
    (0..y.nrows()).filter(|&j| y.row(j).iter().all(|&v| v == 0.0)).collect()
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FitReport {
    /// Mean per-sample objective: after the first encoding, then after
    /// every dictionary update.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Atoms unused by the final codes.
    pub dead_atoms: Vec<usize>,
    /// Ridge used by each dictionary update.
    pub ridges: Vec<f64>,
    /// Trace positions where the objective rose. Only possible for the
    /// locality-constrained schemes, whose prior moves with the dictionary.
    pub increases: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub atoms: usize,
    pub max_iter: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { atoms: 16, max_iter: 20, tol: 1e-6, seed: 0 }
    }
}

/// Mean coding objective of `codes` against the bundle.
pub fn mean_objective(bundle: &GramBundle, codes: &DMatrix<f64>, scheme: Scheme, params: &CodingParams) -> f64 {
    let m = bundle.queries();
    if m == 0 {
        return 0.0;
    }
    let total: f64 = (0..m)
        .map(|i| coding_objective(&bundle.query(i), &codes.column(i).into_owned(), scheme, params))
        .sum();
    total / m as f64
}

/// Whether both alternating steps minimize the same objective, so that the
/// trace must not increase.
pub fn is_monotone_scheme(scheme: Scheme) -> bool {
    matches!(scheme, Scheme::HardBow | Scheme::SoftBow | Scheme::Ksc)
}

pub(crate) fn step_slack(previous: f64, ridge: f64) -> f64 {
    let rel = if ridge > 0.0 { 1e-8 } else { 1e-10 };
    rel * previous.abs().max(1.0)
}

/// Alternates batch encoding of the training set with dictionary updates.
pub fn fit_alternating(
    x: &Samples,
    spec: &KernelSpec,
    scheme: Scheme,
    params: &CodingParams,
    opts: &FitOptions,
) -> Result<(DualDictionary, CodeMatrix, FitReport)> {
    let k = gram_self(spec, x)?;
    let init = init_dictionary(x.len(), opts.atoms, opts.seed)?;
    let a0 = init.coefficients().expect("dual").clone();
    let (a, codes, report) = fit_alternating_gram(&k, a0, scheme, params, opts)?;
    Ok((DualDictionary::dual(a), codes, report))
}

/// [`fit_alternating`] on a precomputed training Gram and initial coefficients.
pub fn fit_alternating_gram(
    k: &DMatrix<f64>,
    a0: DMatrix<f64>,
    scheme: Scheme,
    params: &CodingParams,
    opts: &FitOptions,
) -> Result<(DMatrix<f64>, CodeMatrix, FitReport)> {
    if opts.max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
    }
    if scheme == Scheme::SoftBow {
        return fit_soft_bow(k, a0, params, opts);
    }
    let mut a = a0;
    let mut report = FitReport::default();
    let mut bundle = GramBundle::from_train_gram(k, &a)?;
    let mut codes = encode_batch(&bundle, params, scheme)?;
    report.objective_trace.push(mean_objective(&bundle, &codes.y, scheme, params));

    for it in 1..=opts.max_iter {
        if it > 1 {
            codes = encode_batch(&bundle, params, scheme)?;
        }
        let update = match scheme {
            Scheme::LlcApprox => update_dictionary_llc(&codes)?,
            _ => update_dictionary(&codes.y)?,
        };
        a = update.a;
        bundle = GramBundle::from_train_gram(k, &a)?;
        let current = mean_objective(&bundle, &codes.y, scheme, params);
        report.ridges.push(update.ridge);
        report.iterations = it;
        let previous = *report.objective_trace.last().expect("seeded");
        report.objective_trace.push(current);
        if current > previous + step_slack(previous, update.ridge) {
            if is_monotone_scheme(scheme) {
                return Err(Error::MonotonicityViolation { iteration: it, previous, current });
            }
            report.increases.push(it);
        }
        if relative_decrease(previous, current) < opts.tol {
            report.converged = true;
            break;
        }
    }
    report.dead_atoms = dead_atoms(&codes.y);
    Ok((a, codes, report))
}

/// Learns `opts.atoms` atoms per class from that class's training samples
/// and stacks them into one labelled dual dictionary over all of `k`'s
/// samples. `max_iter = 0` keeps the randomly drawn class samples.
pub fn fit_per_class(
    k: &DMatrix<f64>,
    labels: &[usize],
    scheme: Scheme,
    params: &CodingParams,
    opts: &FitOptions,
) -> Result<(DualDictionary, Vec<FitReport>)> {
    let m = k.nrows();
    if labels.len() != m {
        return Err(Error::DimensionMismatch { context: "labels vs training Gram", expected: m, found: labels.len() });
    }
    let classes = labels.iter().max().map_or(0, |c| c + 1);
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut atom_labels = Vec::new();
    let mut reports = Vec::new();
    for c in 0..classes {
        let members: Vec<usize> = (0..m).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let seed = opts.seed.wrapping_add(c as u64);
        let a0 = init_dictionary(members.len(), opts.atoms, seed)?.coefficients().expect("dual").clone();
        let a = if opts.max_iter == 0 {
            a0
        } else {
            let kc = symmetric_from_fn(members.len(), |i, j| k[(members[i], members[j])]);
            let (a, _, report) = fit_alternating_gram(&kc, a0, scheme, params, &FitOptions { seed, ..opts.clone() })?;
            reports.push(report);
            a
        };
        for col in a.column_iter() {
            let mut full = DVector::zeros(m);
            for (r, &i) in members.iter().enumerate() {
                full[i] = col[r];
            }
            columns.push(full);
            atom_labels.push(c);
        }
    }
    let dict = DualDictionary::dual(DMatrix::from_columns(&columns)).with_labels(atom_labels)?;
    Ok((dict, reports))
}

pub(crate) fn relative_decrease(previous: f64, current: f64) -> f64 {
    if previous == 0.0 {
        return 0.0;
    }
    (previous - current) / previous.abs()
}

/// Soft-assignment objective as a function of the coefficients alone: the
/// codes are recomputed from the dictionary.
pub fn soft_bow_objective(k: &DMatrix<f64>, a: &DMatrix<f64>, params: &CodingParams) -> Result<(f64, CodeMatrix)> {
    let bundle = GramBundle::from_train_gram(k, a)?;
    let codes = encode_batch(&bundle, params, Scheme::SoftBow)?;
    Ok((mean_objective(&bundle, &codes.y, Scheme::SoftBow, params), codes))
}

/// Gradient of [`soft_bow_objective`] with respect to `A`, including the
/// dependence of the soft assignments on the atoms.
pub fn soft_bow_gradient(k: &DMatrix<f64>, a: &DMatrix<f64>, y: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let m = k.nrows();
    // R = I - A Y, columns e_i - A y_i.
    let mut r = -(a * y);
    for i in 0..m {
        r[(i, i)] += 1.0;
    }
    let kr = k * &r;
    // g_i = d recon_i / d y_i, h_i = softmax Jacobian applied to g_i.
    let g = -2.0 * a.tr_mul(&kr);
    let mut h = DMatrix::zeros(y.nrows(), m);
    for i in 0..m {
        let yi = y.column(i);
        let gi = g.column(i);
        let mean = yi.dot(&gi);
        for j in 0..y.nrows() {
            h[(j, i)] = yi[j] * (gi[j] - mean);
        }
    }
    let hsum: DVector<f64> = h.column_sum();
    let ka = k * a;
    let mut grad = -2.0 * &kr * y.transpose() + 2.0 * sigma * (k * h.transpose());
    for j in 0..a.ncols() {
        grad.column_mut(j).axpy(-2.0 * sigma * hsum[j], &ka.column(j), 1.0);
    }
    grad / m as f64
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 100;

fn fit_soft_bow(
    k: &DMatrix<f64>,
    a0: DMatrix<f64>,
    params: &CodingParams,
    opts: &FitOptions,
) -> Result<(DMatrix<f64>, CodeMatrix, FitReport)> {
    let mut a = a0;
    let (mut f, mut codes) = soft_bow_objective(k, &a, params)?;
    let mut report = FitReport { objective_trace: vec![f], ..Default::default() };
    let mut step = 1.0;
    for it in 1..=opts.max_iter {
        report.iterations = it;
        let grad = soft_bow_gradient(k, &a, &codes.y, params.sigma);
        let gnorm2 = grad.norm_squared();
        let mut accepted = None;
        if gnorm2 > 0.0 {
            for _ in 0..MAX_HALVINGS {
                let cand = &a - step * &grad;
                let (fc, cc) = soft_bow_objective(k, &cand, params)?;
                if fc <= f - ARMIJO * step * gnorm2 {
                    accepted = Some((cand, fc, cc));
                    break;
                }
                step *= 0.5;
            }
        }
        report.ridges.push(0.0);
        let Some((cand, fc, cc)) = accepted else {
            report.objective_trace.push(f);
            report.converged = true;
            break;
        };
        let previous = f;
        a = cand;
        f = fc;
        codes = cc;
        step *= 2.0;
        report.objective_trace.push(f);
        if relative_decrease(previous, f) < opts.tol {
            report.converged = true;
            break;
        }
    }
    report.dead_atoms = dead_atoms(&codes.y);
    Ok((a, codes, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_blobs;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn two_clusters(per: usize, seed: u64) -> Samples {
        let centers = vec![DVector::from_vec(vec![2.0, 0.0]), DVector::from_vec(vec![-2.0, 0.5])];
        let covs = vec![DMatrix::identity(2, 2) * 0.1; 2];
        gen_blobs(per, &centers, &covs, seed).unwrap().samples
    }

    fn gaussian(beta: f64) -> KernelSpec {
        KernelSpec::Base(crate::kernels::BaseKernel::Gaussian { beta })
    }

    #[test]
    fn init_selects_distinct_columns() {
        let d = init_dictionary(10, 3, 7).unwrap();
        let a = d.coefficients().unwrap();
        assert_eq!(a.shape(), (10, 3));
        let picks: Vec<usize> = (0..3).map(|j| a.column(j).iamax()).collect();
        for j in 0..3 {
            assert_eq!(a.column(j).sum(), 1.0);
        }
        assert!(picks[0] != picks[1] && picks[1] != picks[2] && picks[0] != picks[2]);
        // Recorded from the ChaCha8 sampler at the first verified build.
        assert_eq!(picks, vec![8, 9, 1]);
        assert_eq!(d, init_dictionary(10, 3, 7).unwrap());
        let full = init_dictionary(5, 5, 1).unwrap();
        let p = full.coefficients().unwrap();
        assert!(p.row_sum().iter().all(|&v| v == 1.0));
        assert_eq!(p.column_sum(), DVector::from_element(5, 1.0));
        assert!(init_dictionary(3, 4, 0).is_err());
        assert!(init_dictionary(3, 0, 0).is_err());
    }

    #[test]
    fn update_examples() {
        let id = DMatrix::identity(4, 4);
        let u = update_dictionary(&id).unwrap();
        assert_eq!(u.ridge, 0.0);
        assert_relative_eq!(u.a, id, epsilon = 1e-15);

        let q = mat(6, 3, 2).qr().q();
        let y = q.transpose();
        assert_relative_eq!(update_dictionary(&y).unwrap().a, q, epsilon = 1e-12);
    }

    #[test]
    fn update_is_stationary() {
        let y = mat(4, 12, 3);
        let a = update_dictionary(&y).unwrap().a;
        let residual = 2.0 * &y - 2.0 * &y * y.transpose() * a.transpose();
        assert!(residual.amax() <= 1e-8);
    }

    #[test]
    fn dead_atom_gets_finite_zero_column() {
        let mut y = mat(3, 8, 4);
        y.row_mut(1).fill(0.0);
        assert!(update_dictionary_with(&y, 0.0).is_err());
        let u = update_dictionary(&y).unwrap();
        assert!(u.ridge > 0.0);
        assert!(u.a.iter().all(|v| v.is_finite()));
        assert_eq!(u.a.column(1).amax(), 0.0);
        assert_eq!(dead_atoms(&y), vec![1]);
    }

    #[test]
    fn llc_update_masks_outside_support() {
        let y = mat(4, 6, 5);
        let full = CodeMatrix {
            y: y.clone(),
            constraint: crate::coders::CodeConstraint::SumToOne,
            supports: Some(vec![vec![0, 1, 2, 3]; 6]),
        };
        assert_eq!(update_dictionary_llc(&full).unwrap().a, update_dictionary(&y).unwrap().a);
        let masked = CodeMatrix { supports: Some(vec![vec![0, 2], vec![1, 3], vec![0, 1], vec![2, 3], vec![0, 3], vec![1, 2]]), ..full };
        let ym = masked_codes(&masked).unwrap();
        assert_eq!(ym[(1, 0)], 0.0);
        let a = update_dictionary_llc(&masked).unwrap().a;
        assert!((2.0 * &ym - 2.0 * &ym * ym.transpose() * a.transpose()).amax() <= 1e-8);
    }

    #[test]
    fn full_dictionary_reconstructs_exactly() {
        let x = two_clusters(5, 6);
        let params = CodingParams { gamma: 0.0, ..Default::default() };
        let opts = FitOptions { atoms: 10, max_iter: 1, tol: 0.0, seed: 3 };
        let (_, _, report) = fit_alternating(&x, &gaussian(0.5), Scheme::Ksc, &params, &opts).unwrap();
        assert!(report.objective_trace[0] <= 1e-10, "{:?}", report.objective_trace);
    }

    #[test]
    fn single_iteration_has_two_trace_entries() {
        let x = two_clusters(6, 7);
        let opts = FitOptions { atoms: 3, max_iter: 1, tol: 0.0, seed: 1 };
        for scheme in [Scheme::HardBow, Scheme::SoftBow, Scheme::Ksc, Scheme::LlcExact, Scheme::LlcApprox] {
            let params = CodingParams { n_local: 2, ..Default::default() };
            let (d, codes, report) = fit_alternating(&x, &gaussian(0.5), scheme, &params, &opts).unwrap();
            assert_eq!(report.objective_trace.len(), 2, "{scheme:?}");
            assert_eq!(report.iterations, 1);
            assert_eq!(d.len(), 3);
            assert_eq!(codes.samples(), 12);
        }
    }

    #[test]
    fn sparse_coding_fit_decreases() {
        let x = two_clusters(10, 8);
        let params = CodingParams { gamma: 0.01, ..Default::default() };
        let opts = FitOptions { atoms: 2, max_iter: 15, tol: 1e-12, seed: 2 };
        let (_, _, report) = fit_alternating(&x, &gaussian(0.5), Scheme::Ksc, &params, &opts).unwrap();
        let t = &report.objective_trace;
        assert!(t.last().unwrap() <= &t[0]);
        for w in t.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0));
        }
        assert!(report.increases.is_empty());
    }

    #[test]
    fn soft_bow_gradient_matches_finite_differences() {
        let x = two_clusters(4, 9);
        let k = gram_self(&gaussian(0.3), &x).unwrap();
        let a = mat(8, 3, 10).map(|v| 0.3 * v);
        let params = CodingParams { sigma: 1.5, ..Default::default() };
        let (_, codes) = soft_bow_objective(&k, &a, &params).unwrap();
        let grad = soft_bow_gradient(&k, &a, &codes.y, params.sigma);
        let h = 1e-6;
        for (i, j) in [(0, 0), (3, 1), (7, 2), (5, 0)] {
            let mut p = a.clone();
            p[(i, j)] += h;
            let mut n = a.clone();
            n[(i, j)] -= h;
            let fd = (soft_bow_objective(&k, &p, &params).unwrap().0 - soft_bow_objective(&k, &n, &params).unwrap().0) / (2.0 * h);
            assert!((fd - grad[(i, j)]).abs() <= 1e-6 * (1.0 + fd.abs()), "({i},{j}): {fd} vs {}", grad[(i, j)]);
        }
    }

    #[test]
    fn soft_bow_fit_is_monotone() {
        let x = two_clusters(8, 11);
        let params = CodingParams { sigma: 2.0, ..Default::default() };
        let opts = FitOptions { atoms: 3, max_iter: 10, tol: 1e-12, seed: 4 };
        let (_, codes, report) = fit_alternating(&x, &gaussian(0.5), Scheme::SoftBow, &params, &opts).unwrap();
        codes.check_constraint().unwrap();
        for w in report.objective_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(report.objective_trace.last().unwrap() < &report.objective_trace[0]);
    }

    #[test]
    fn dual_bundle_of_identity_selection_matches_explicit() {
        let x = two_clusters(3, 12);
        let d = init_dictionary(6, 2, 5).unwrap();
        let picks: Vec<usize> = (0..2).map(|j| d.coefficients().unwrap().column(j).iamax()).collect();
        let spec = gaussian(0.7);
        let dual = d.bundle(&spec, &x, &x).unwrap();
        let explicit = DualDictionary::explicit(x.select(&picks)).bundle(&spec, &x, &x).unwrap();
        assert_relative_eq!(dual.kdd, explicit.kdd, epsilon = 1e-15);
        assert_relative_eq!(dual.kxd, explicit.kxd, epsilon = 1e-15);
        assert!(DualDictionary::explicit(x.clone()).with_labels(vec![0; 5]).is_err());
    }
}
