//! Encoders working purely on kernel values.
//!
//! Each encoder minimizes (or, for the bag-of-words variants, evaluates in
//! closed form) the kernelized reconstruction
//! `k(x,x) - 2 y'k(x,D) + y'K(D,D)y` under a scheme-specific prior and
//! constraint set.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{symmetric_from_fn, GramBundle, QueryGram};
use crate::numerics::{self, psd_factor, PsdFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Nearest atom in feature space.
    HardBow,
    /// Softmax of negative feature-space distances.
    SoftBow,
    /// l1-regularized reconstruction.
    Ksc,
    /// Locality-weighted ridge prior with a sum-to-one constraint.
    LlcExact,
    /// Sum-to-one reconstruction over the nearest atoms only.
    LlcApprox,
}

impl Scheme {
    pub fn constraint(self) -> CodeConstraint {
        match self {
            Scheme::HardBow => CodeConstraint::OneHot,
            Scheme::SoftBow => CodeConstraint::Simplex,
            Scheme::Ksc => CodeConstraint::None,
            Scheme::LlcExact | Scheme::LlcApprox => CodeConstraint::SumToOne,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::HardBow => "hard_bow",
            Scheme::SoftBow => "soft_bow",
            Scheme::Ksc => "ksc",
            Scheme::LlcExact => "llc_exact",
            Scheme::LlcApprox => "llc_approx",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "hard_bow" => Scheme::HardBow,
            "soft_bow" => Scheme::SoftBow,
            "ksc" => Scheme::Ksc,
            "llc_exact" => Scheme::LlcExact,
            "llc_approx" => Scheme::LlcApprox,
            other => return Err(Error::InvalidParameter(format!("unknown coding scheme `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeConstraint {
    None,
    OneHot,
    Simplex,
    SumToOne,
}

/// How the approximate LLC solution is rescaled onto the constraint set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LlcNormalization {
    /// Divide by `1'y`; the sum-to-one constraint then holds exactly.
    #[default]
    SignedSum,
    /// Divide by `|y|_1`. Only sums to one when all entries share a sign.
    AbsoluteL1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodingParams {
    /// Prior weight.
    pub gamma: f64,
    /// Bandwidth of the soft assignment and of the LLC locality weights.
    pub sigma: f64,
    /// Local dictionary size of approximate LLC.
    pub n_local: usize,
    /// Relative ridge of the LLC systems (scaled by trace / size).
    pub eps_llc: f64,
    /// Eigenvalue truncation for sparse coding.
    pub tau: f64,
    pub normalization: LlcNormalization,
}

impl Default for CodingParams {
    fn default() -> Self {
        CodingParams {
            gamma: 0.1,
            sigma: 1.0,
            n_local: 5,
            eps_llc: 1e-6,
            tau: numerics::DEFAULT_TAU,
            normalization: LlcNormalization::SignedSum,
        }
    }
}

impl CodingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.sigma >= 0.0) || !(self.eps_llc >= 0.0) {
            return Err(Error::InvalidParameter(
                "gamma, sigma and eps_llc must be nonnegative".into(),
            ));
        }
        if self.n_local == 0 {
            return Err(Error::InvalidParameter("n_local must be at least 1".into()));
        }
        Ok(())
    }
}

/// Codes for a batch of samples, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    pub y: DMatrix<f64>,
    pub constraint: CodeConstraint,
    /// Per-sample local dictionaries (approximate LLC only).
    pub supports: Option<Vec<Vec<usize>>>,
}

impl CodeMatrix {
    pub fn atoms(&self) -> usize {
        self.y.nrows()
    }

    pub fn samples(&self) -> usize {
        self.y.ncols()
    }

    /// Checks every column against the constraint tag.
    pub fn check_constraint(&self) -> Result<()> {
        for (i, col) in self.y.column_iter().enumerate() {
            let sum: f64 = col.sum();
            let ok = match self.constraint {
                CodeConstraint::None => true,
                CodeConstraint::OneHot => {
                    col.iter().all(|&v| v == 0.0 || v == 1.0) && sum == 1.0
                }
                CodeConstraint::Simplex => {
                    col.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() <= 1e-12
                }
                CodeConstraint::SumToOne => (sum - 1.0).abs() <= 1e-10,
            };
            if !ok {
                return Err(Error::InvalidParameter(format!(
                    "code {i} violates the {:?} constraint",
                    self.constraint
                )));
            }
        }
        Ok(())
    }
}

/// Discriminative least-squares term `eta |t - G y|^2` folded into a coding
/// problem.
#[derive(Debug, Clone, Copy)]
pub struct Augmentation<'a> {
    /// `S x N`
    pub g: &'a DMatrix<f64>,
    /// `S`
    pub target: &'a DVector<f64>,
    pub eta: f64,
}

impl Augmentation<'_> {
    fn check(&self, atoms: usize) -> Result<()> {
        if self.g.ncols() != atoms {
            return Err(Error::DimensionMismatch { context: "classifier columns vs atoms", expected: atoms, found: self.g.ncols() });
        }
        if self.target.len() != self.g.nrows() {
            return Err(Error::DimensionMismatch { context: "label length vs classifier rows", expected: self.g.nrows(), found: self.target.len() });
        }
        Ok(())
    }

    fn quadratic(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let gtg = self.g.tr_mul(self.g);
        symmetric_from_fn(q.nrows(), |i, j| q[(i, j)] + self.eta * gtg[(i, j)])
    }

    fn linear(&self, b: &DVector<f64>) -> DVector<f64> {
        b + self.eta * self.g.tr_mul(self.target)
    }

    fn constant(&self, c: f64) -> f64 {
        c + self.eta * self.target.norm_squared()
    }
}

/// Quadratic `c - 2 y'b + y'Qy` a coder minimizes, possibly augmented.
struct Quadratic {
    q: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

impl Quadratic {
    fn new(view: &QueryGram<'_>, aug: Option<&Augmentation<'_>>) -> Result<Quadratic> {
        Ok(match aug {
            Some(a) if a.eta != 0.0 => {
                a.check(view.kxd.len())?;
                Quadratic {
                    q: a.quadratic(view.kdd),
                    b: a.linear(&view.kxd),
                    c: a.constant(view.kxx),
                }
            }
            _ => Quadratic {
                q: view.kdd.clone(),
                b: view.kxd.clone(),
                c: view.kxx,
            },
        })
    }
}

/// `|phi(x) - phi(d_j)|^2`, clamped at zero.
pub fn rkhs_distance_sq(view: &QueryGram<'_>, j: usize) -> f64 {
    (view.kxx - 2.0 * view.kxd[j] + view.kdd[(j, j)]).max(0.0)
}

pub fn rkhs_distances(view: &QueryGram<'_>) -> DVector<f64> {
    DVector::from_fn(view.kxd.len(), |j, _| rkhs_distance_sq(view, j))
}

/// `k(x,x) - 2 y'k(x,D) + y'K(D,D)y`
pub fn reconstruction_error(view: &QueryGram<'_>, y: &DVector<f64>) -> f64 {
    view.kxx - 2.0 * y.dot(&view.kxd) + y.dot(&(view.kdd * y))
}

/// Locality weights `exp(sigma (|phi(x) - phi(d_i)| - min_j |phi(x) - phi(d_j)|))`.
pub fn llc_locality(view: &QueryGram<'_>, sigma: f64) -> DVector<f64> {
    let dist = rkhs_distances(view).map(f64::sqrt);
    let min = dist.min();
    dist.map(|d| (sigma * (d - min)).exp())
}

/// Reconstruction plus the scheme's prior, `gamma r(y)`.
pub fn coding_objective(view: &QueryGram<'_>, y: &DVector<f64>, scheme: Scheme, params: &CodingParams) -> f64 {
    let recon = reconstruction_error(view, y);
    match scheme {
        Scheme::Ksc => recon + params.gamma * y.lp_norm(1),
        Scheme::LlcExact if params.gamma != 0.0 => {
            let e = llc_locality(view, params.sigma);
            recon + params.gamma * e.component_mul(y).norm_squared()
        }
        _ => recon,
    }
}

fn argmin_first(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] < v[best] {
            best = j;
        }
    }
    best
}

pub fn encode_kbow_hard(view: &QueryGram<'_>) -> Result<DVector<f64>> {
    let n = view.kxd.len();
    if n == 0 {
        return Err(Error::EmptyInput("dictionary"));
    }
    let mut y = DVector::zeros(n);
    y[argmin_first(&rkhs_distances(view))] = 1.0;
    Ok(y)
}

pub fn encode_kbow_soft(view: &QueryGram<'_>, sigma: f64) -> Result<DVector<f64>> {
    if view.kxd.is_empty() {
        return Err(Error::EmptyInput("dictionary"));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("soft assignment bandwidth {sigma} must be > 0")));
    }
    let d = rkhs_distances(view);
    let min = d.min();
    let w = d.map(|v| (-sigma * (v - min)).exp());
    let total = w.sum();
    Ok(w / total)
}

/// Sparse coder over a fixed (possibly augmented) dictionary Gram.
///
/// The Gram is clipped to its positive eigenspace once, and each query is
/// solved as `min y'Qy - 2 b'y + gamma |y|_1` with `b` projected onto that
/// eigenspace, which is the vector-space problem
/// `|x~ - A y|^2 + gamma |y|_1` with `A = diag(s)^{1/2} U'`.
#[derive(Debug, Clone)]
pub struct KscSolver {
    q: DMatrix<f64>,
    projector: DMatrix<f64>,
    factor: PsdFactor,
}

impl KscSolver {
    pub fn new(kdd: &DMatrix<f64>, tau: f64) -> Result<Self> {
        let factor = psd_factor(kdd, tau)?;
        Ok(KscSolver {
            q: factor.reconstruct(),
            projector: factor.projector(),
            factor,
        })
    }

    pub fn factor(&self) -> &PsdFactor {
        &self.factor
    }

    /// The clipped Gram used as the quadratic term.
    pub fn quadratic(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn solve(&self, kxd: &DVector<f64>, gamma: f64) -> Result<DVector<f64>> {
        if kxd.len() != self.q.nrows() {
            return Err(Error::DimensionMismatch {
                context: "k(x,D) vs sparse coder dictionary",
                expected: self.q.nrows(),
                found: kxd.len(),
            });
        }
        let b = &self.projector * kxd;
        numerics::lasso_solve(&self.q, &b, gamma)
    }

    /// [`KscSolver::solve`] with a discriminative term added to the clipped
    /// quadratic and the projected linear term.
    pub fn solve_augmented(&self, kxd: &DVector<f64>, gamma: f64, aug: Option<&Augmentation<'_>>) -> Result<DVector<f64>> {
        match aug {
            Some(a) if a.eta != 0.0 => {
                a.check(self.q.nrows())?;
                let b = &self.projector * kxd;
                numerics::lasso_solve(&a.quadratic(&self.q), &a.linear(&b), gamma)
            }
            _ => self.solve(kxd, gamma),
        }
    }
}

pub fn encode_ksc(solver: &KscSolver, view: &QueryGram<'_>, gamma: f64) -> Result<DVector<f64>> {
    solver.solve(&view.kxd, gamma)
}

/// Exact locality-constrained coding through its KKT system.
pub fn encode_kllc_exact(
    view: &QueryGram<'_>,
    params: &CodingParams,
    aug: Option<&Augmentation<'_>>,
) -> Result<DVector<f64>> {
    let n = view.kxd.len();
    if n == 0 {
        return Err(Error::EmptyInput("dictionary"));
    }
    if n == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }
    let quad = Quadratic::new(view, aug)?;
    let e = llc_locality(view, params.sigma);
    let ridge = params.eps_llc * view.kdd.trace() / n as f64;
    let mut kkt = DMatrix::zeros(n + 1, n + 1);
    for j in 0..n {
        for i in 0..n {
            kkt[(i, j)] = 2.0 * quad.q[(i, j)];
        }
        kkt[(j, j)] += 2.0 * (params.gamma * e[j] * e[j] + ridge);
        kkt[(n, j)] = 1.0;
        kkt[(j, n)] = 1.0;
    }
    let mut rhs = DVector::zeros(n + 1);
    for i in 0..n {
        rhs[i] = 2.0 * quad.b[i];
    }
    rhs[n] = 1.0;
    let sol = kkt
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or(Error::Singular { condition: f64::INFINITY })?;
    Ok(sol.rows(0, n).into_owned())
}

/// Indices of the `count` smallest distances; ties go to the lower index.
pub fn nearest_atoms(view: &QueryGram<'_>, count: usize) -> Vec<usize> {
    let d = rkhs_distances(view);
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// Approximate locality-constrained coding over the nearest atoms.
///
/// Returns the code (zero outside the local support) and the support.
pub fn encode_kllc_approx(
    view: &QueryGram<'_>,
    params: &CodingParams,
    aug: Option<&Augmentation<'_>>,
) -> Result<(DVector<f64>, Vec<usize>)> {
    let n = view.kxd.len();
    if n == 0 {
        return Err(Error::EmptyInput("dictionary"));
    }
    let nb = params.n_local.min(n);
    let support = nearest_atoms(view, nb);
    let mut y = DVector::zeros(n);
    if nb == 1 {
        y[support[0]] = 1.0;
        return Ok((y, support));
    }
    let quad = Quadratic::new(view, aug)?;
    // |phi(x) - Phi(B) y|^2 = y'Cy whenever 1'y = 1.
    let c = symmetric_from_fn(nb, |i, j| {
        let (si, sj) = (support[i], support[j]);
        quad.q[(si, sj)] - quad.b[si] - quad.b[sj] + quad.c
    });
    let tr = c.trace();
    let local = if tr > 0.0 {
        let ridge = params.eps_llc * tr / nb as f64;
        let ones = DMatrix::from_element(nb, 1, 1.0);
        let raw = numerics::ridge_solve(&c, &ones, ridge)?.column(0).into_owned();
        normalize_llc(raw, params.normalization)?
    } else {
        // Every local atom coincides with the query: all feasible codes are optimal.
        DVector::from_element(nb, 1.0 / nb as f64)
    };
    for (k, &j) in support.iter().enumerate() {
        y[j] = local[k];
    }
    Ok((y, support))
}

fn normalize_llc(raw: DVector<f64>, mode: LlcNormalization) -> Result<DVector<f64>> {
    let sum = match mode {
        LlcNormalization::SignedSum => raw.sum(),
        LlcNormalization::AbsoluteL1 => raw.lp_norm(1),
    };
    if !(sum.abs() > 1e-14) || !sum.is_finite() {
        return Err(Error::DegenerateNormalization { sum });
    }
    Ok(raw / sum)
}

/// Solves the nonsymmetric system `(K(B,B) - k(x,B) 1') y = 1` over `support`
/// and normalizes by the coefficient sum. Agrees with the symmetric form used
/// by [`encode_kllc_approx`] on the constraint set.
pub fn llc_nonsymmetric_form(view: &QueryGram<'_>, support: &[usize]) -> Result<DVector<f64>> {
    let nb = support.len();
    let m = DMatrix::from_fn(nb, nb, |i, j| {
        view.kdd[(support[i], support[j])] - view.kxd[support[i]]
    });
    let raw = m
        .lu()
        .solve(&DVector::from_element(nb, 1.0))
        .ok_or(Error::Singular { condition: f64::INFINITY })?;
    let local = normalize_llc(raw, LlcNormalization::SignedSum)?;
    let mut y = DVector::zeros(view.kxd.len());
    for (k, &j) in support.iter().enumerate() {
        y[j] = local[k];
    }
    Ok(y)
}

/// Per-batch encoder state: the sparse coder factorizes `K(D,D)` once.
pub struct BatchEncoder<'a> {
    bundle: &'a GramBundle,
    params: &'a CodingParams,
    scheme: Scheme,
    ksc: Option<KscSolver>,
}

impl<'a> BatchEncoder<'a> {
    pub fn new(bundle: &'a GramBundle, params: &'a CodingParams, scheme: Scheme) -> Result<Self> {
        params.validate()?;
        let ksc = match scheme {
            Scheme::Ksc => Some(KscSolver::new(&bundle.kdd, params.tau)?),
            _ => None,
        };
        Ok(BatchEncoder { bundle, params, scheme, ksc })
    }

    pub fn encode(&self, q: usize) -> Result<(DVector<f64>, Option<Vec<usize>>)> {
        self.encode_augmented(q, None)
    }

    /// Encodes query `q` with an optional discriminative term.
    pub fn encode_augmented(&self, q: usize, aug: Option<&Augmentation<'_>>) -> Result<(DVector<f64>, Option<Vec<usize>>)> {
        encode_one(&self.bundle.query(q), self.scheme, self.params, self.ksc.as_ref(), aug)
    }

    pub fn bundle(&self) -> &GramBundle {
        self.bundle
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn encode_all(&self) -> Result<CodeMatrix> {
        let results: Vec<_> = (0..self.bundle.queries())
            .into_par_iter()
            .map(|q| self.encode(q))
            .collect::<Result<_>>()?;
        assemble(self.bundle.atoms(), self.scheme, results)
    }
}

/// Encodes one query. `ksc` must be given for sparse coding.
pub fn encode_one(
    view: &QueryGram<'_>,
    scheme: Scheme,
    params: &CodingParams,
    ksc: Option<&KscSolver>,
    aug: Option<&Augmentation<'_>>,
) -> Result<(DVector<f64>, Option<Vec<usize>>)> {
    let aug = aug.filter(|a| a.eta != 0.0);
    let y = match scheme {
        Scheme::HardBow => match aug {
            None => encode_kbow_hard(view)?,
            Some(a) => encode_kbow_hard_augmented(view, a)?,
        },
        Scheme::SoftBow => {
            if aug.is_some() {
                return Err(Error::InvalidParameter(
                    "soft assignments are fixed by the dictionary and take no discriminative term".into(),
                ));
            }
            encode_kbow_soft(view, params.sigma)?
        }
        Scheme::Ksc => {
            let solver = ksc.ok_or_else(|| Error::InvalidParameter("sparse coding needs a solver".into()))?;
            solver.solve_augmented(&view.kxd, params.gamma, aug)?
        }
        Scheme::LlcExact => encode_kllc_exact(view, params, aug)?,
        Scheme::LlcApprox => {
            let (y, support) = encode_kllc_approx(view, params, aug)?;
            return Ok((y, Some(support)));
        }
    };
    Ok((y, None))
}

/// One-hot code minimizing `|phi(x) - phi(d_j)|^2 + eta |t - g_j|^2`.
fn encode_kbow_hard_augmented(view: &QueryGram<'_>, aug: &Augmentation<'_>) -> Result<DVector<f64>> {
    let n = view.kxd.len();
    if n == 0 {
        return Err(Error::EmptyInput("dictionary"));
    }
    aug.check(n)?;
    let cost = DVector::from_fn(n, |j, _| {
        rkhs_distance_sq(view, j) + aug.eta * (aug.target - aug.g.column(j)).norm_squared()
    });
    let mut y = DVector::zeros(n);
    y[argmin_first(&cost)] = 1.0;
    Ok(y)
}

pub(crate) fn assemble(
    atoms: usize,
    scheme: Scheme,
    results: Vec<(DVector<f64>, Option<Vec<usize>>)>,
) -> Result<CodeMatrix> {
    let mut y = DMatrix::zeros(atoms, results.len());
    let mut supports = Vec::new();
    for (i, (code, support)) in results.into_iter().enumerate() {
        y.set_column(i, &code);
        if let Some(s) = support {
            supports.push(s);
        }
    }
    Ok(CodeMatrix {
        y,
        constraint: scheme.constraint(),
        supports: (scheme == Scheme::LlcApprox).then_some(supports),
    })
}

/// Encodes every query of the bundle with the selected scheme.
pub fn encode_batch(bundle: &GramBundle, params: &CodingParams, scheme: Scheme) -> Result<CodeMatrix> {
    BatchEncoder::new(bundle, params, scheme)?.encode_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{BaseKernel, KernelSpec, Samples};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear() -> KernelSpec {
        KernelSpec::Base(BaseKernel::Linear)
    }

    fn gaussian(beta: f64) -> KernelSpec {
        KernelSpec::Base(BaseKernel::Gaussian { beta })
    }

    fn mat(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn bundle(spec: &KernelSpec, d: &DMatrix<f64>, x: &DMatrix<f64>) -> GramBundle {
        GramBundle::explicit(spec, &Samples::Vectors(d.clone()), &Samples::Vectors(x.clone())).unwrap()
    }

    #[test]
    fn distance_examples() {
        let b = bundle(&gaussian(1.0), &DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 0.0));
        assert_relative_eq!(rkhs_distance_sq(&b.query(0), 0), 2.0 - 2.0 * (-1.0f64).exp(), epsilon = 1e-15);
        let d = DMatrix::from_column_slice(2, 1, &[0.0, 4.0]);
        let x = DMatrix::from_column_slice(2, 1, &[3.0, 0.0]);
        assert_eq!(rkhs_distance_sq(&bundle(&linear(), &d, &x).query(0), 0), 25.0);
        let d = mat(3, 4, 1);
        let b = bundle(&gaussian(0.5), &d, &d.columns(2, 1).into_owned());
        assert_eq!(rkhs_distance_sq(&b.query(0), 2), 0.0);
    }

    #[test]
    fn hard_bow_cases() {
        let d = mat(3, 5, 2);
        let b = bundle(&gaussian(1.0), &d, &d.columns(3, 1).into_owned());
        let y = encode_kbow_hard(&b.query(0)).unwrap();
        assert_eq!(y[3], 1.0);
        assert_eq!(y.sum(), 1.0);

        let one = bundle(&gaussian(1.0), &mat(3, 1, 3), &mat(3, 1, 4));
        assert_eq!(encode_kbow_hard(&one.query(0)).unwrap().as_slice(), &[1.0]);

        let x = mat(3, 10, 6);
        let b = bundle(&gaussian(0.7), &d, &x);
        for q in 0..10 {
            let y = encode_kbow_hard(&b.query(q)).unwrap();
            let nn = (0..5)
                .min_by(|&i, &j| {
                    let di = (d.column(i) - x.column(q)).norm();
                    let dj = (d.column(j) - x.column(q)).norm();
                    di.total_cmp(&dj)
                })
                .unwrap();
            assert_eq!(y[nn], 1.0);
        }
    }

    #[test]
    fn hard_bow_ties_pick_lowest_index() {
        let d = DMatrix::from_row_slice(1, 3, &[-1.0, 1.0, 1.0]);
        let b = bundle(&linear(), &d, &DMatrix::from_element(1, 1, 0.0));
        assert_eq!(encode_kbow_hard(&b.query(0)).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn soft_bow_cases() {
        let one = bundle(&gaussian(1.0), &mat(2, 1, 1), &mat(2, 1, 2));
        assert_eq!(encode_kbow_soft(&one.query(0), 3.0).unwrap().as_slice(), &[1.0]);

        let d = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        let b = bundle(&gaussian(1.0), &d, &DMatrix::from_element(1, 1, 0.0));
        let y = encode_kbow_soft(&b.query(0), 2.0).unwrap();
        assert_relative_eq!(y, DVector::from_vec(vec![0.5, 0.5]), epsilon = 1e-15);

        // Distance gap times sigma >= 14 bounds the runner-up mass by exp(-14).
        let d = DMatrix::from_row_slice(1, 3, &[0.1, 1.0, 2.0]);
        let b = bundle(&linear(), &d, &DMatrix::from_element(1, 1, 0.0));
        let dist = rkhs_distances(&b.query(0));
        let gap = dist[1] - dist[0];
        let y = encode_kbow_soft(&b.query(0), 14.0 / gap + 1.0).unwrap();
        assert!(y[0] >= 1.0 - 1e-6);
        assert!(encode_kbow_soft(&b.query(0), 0.0).is_err());
    }

    #[test]
    fn ksc_null_and_orthonormal_cases() {
        let d = mat(4, 6, 7);
        let x = mat(4, 1, 8);
        let b = bundle(&gaussian(0.4), &d, &x);
        let solver = KscSolver::new(&b.kdd, 1e-10).unwrap();
        let u = &solver.factor().u;
        let gamma = 2.0 * (u * u.tr_mul(&b.kxd.column(0).into_owned())).amax();
        assert_eq!(encode_ksc(&solver, &b.query(0), gamma).unwrap(), DVector::zeros(6));

        let eye = DMatrix::identity(3, 3);
        let b = bundle(&linear(), &eye, &eye.columns(1, 1).into_owned());
        let solver = KscSolver::new(&b.kdd, 1e-10).unwrap();
        assert_eq!(encode_ksc(&solver, &b.query(0), 0.0).unwrap().as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn ksc_objective_never_exceeds_the_origin_and_matches_reduced_form() {
        let d = mat(5, 8, 9);
        let x = mat(5, 6, 10);
        let b = bundle(&gaussian(0.8), &d, &x);
        let solver = KscSolver::new(&b.kdd, 1e-10).unwrap();
        let a = solver.factor().sqrt_factor();
        for q in 0..6 {
            let view = b.query(q);
            let y = encode_ksc(&solver, &view, 0.05).unwrap();
            let obj = coding_objective(&view, &y, Scheme::Ksc, &CodingParams { gamma: 0.05, ..Default::default() });
            assert!(obj <= view.kxx + 1e-12);
            let xt = solver.factor().whiten(&view.kxd);
            let reduced = (&xt - &a * &y).norm_squared() + 0.05 * y.lp_norm(1);
            assert!((obj - (reduced + view.kxx - xt.norm_squared())).abs() <= 1e-8);
        }
    }

    #[test]
    fn linear_kernel_objective_equals_explicit_reconstruction() {
        let d = mat(4, 6, 11);
        let x = mat(4, 3, 12);
        let b = bundle(&linear(), &d, &x);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for q in 0..3 {
            let y = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
            let explicit = (x.column(q) - &d * &y).norm_squared();
            assert!((reconstruction_error(&b.query(q), &y) - explicit).abs() <= 1e-10);
        }
    }

    #[test]
    fn llc_exact_cases() {
        let p = CodingParams { gamma: 0.0, eps_llc: 0.0, ..Default::default() };
        let one = bundle(&gaussian(1.0), &mat(2, 1, 1), &mat(2, 1, 2));
        assert_eq!(encode_kllc_exact(&one.query(0), &p, None).unwrap().as_slice(), &[1.0]);

        let eye = DMatrix::identity(2, 2);
        let b = bundle(&linear(), &eye, &DMatrix::from_column_slice(2, 1, &[0.3, 0.3]));
        let y = encode_kllc_exact(&b.query(0), &p, None).unwrap();
        assert_relative_eq!(y, DVector::from_vec(vec![0.5, 0.5]), epsilon = 1e-14);
    }

    #[test]
    fn llc_locality_weights_grow_with_distance() {
        let d = DMatrix::from_row_slice(1, 3, &[0.5, 1.0, 3.0]);
        let b = bundle(&linear(), &d, &DMatrix::from_element(1, 1, 0.0));
        let e = llc_locality(&b.query(0), 2.0);
        assert_eq!(e[0], 1.0);
        assert!(e[0] < e[1] && e[1] < e[2]);
    }

    #[test]
    fn llc_approx_cases() {
        let p = CodingParams { n_local: 1, ..Default::default() };
        let one = bundle(&gaussian(1.0), &mat(2, 1, 1), &mat(2, 1, 2));
        let (y, s) = encode_kllc_approx(&one.query(0), &p, None).unwrap();
        assert_eq!(y.as_slice(), &[1.0]);
        assert_eq!(s, vec![0]);

        let d = mat(3, 6, 21);
        let b = bundle(&gaussian(0.5), &d, &d.columns(4, 1).into_owned());
        let p = CodingParams { n_local: 3, eps_llc: 1e-10, ..Default::default() };
        let (y, s) = encode_kllc_approx(&b.query(0), &p, None).unwrap();
        assert_eq!(s[0], 4);
        assert!(y[4] >= 1.0 - 1e-6);
        assert!((y.sum() - 1.0).abs() <= 1e-10);
        for j in 0..6 {
            if !s.contains(&j) {
                assert_eq!(y[j], 0.0);
            }
        }
    }

    #[test]
    fn llc_symmetric_and_nonsymmetric_forms_agree() {
        for seed in 0..10 {
            let d = mat(5, 8, 100 + seed);
            let x = mat(5, 1, 200 + seed);
            let b = bundle(&gaussian(0.3), &d, &x);
            let p = CodingParams { n_local: 4, eps_llc: 0.0, ..Default::default() };
            let view = b.query(0);
            let (y, support) = encode_kllc_approx(&view, &p, None).unwrap();
            let alt = llc_nonsymmetric_form(&view, &support).unwrap();
            assert!((y - alt).amax() <= 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn llc_absolute_normalization_differs_only_with_mixed_signs() {
        let d = mat(2, 6, 31);
        let x = mat(2, 1, 32);
        let b = bundle(&linear(), &d, &x);
        let view = b.query(0);
        let signed = CodingParams { n_local: 3, eps_llc: 1e-8, ..Default::default() };
        let abs = CodingParams { normalization: LlcNormalization::AbsoluteL1, ..signed.clone() };
        let (ys, _) = encode_kllc_approx(&view, &signed, None).unwrap();
        let (ya, _) = encode_kllc_approx(&view, &abs, None).unwrap();
        if ys.iter().all(|&v| v >= 0.0) {
            assert_relative_eq!(ys, ya, epsilon = 1e-12);
        } else {
            assert!((ya.sum() - 1.0).abs() > 1e-10);
            assert_relative_eq!(ya.lp_norm(1), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn augmentation_with_zero_weight_or_zero_classifier_is_inert() {
        let d = mat(3, 5, 41);
        let x = mat(3, 1, 42);
        let b = bundle(&gaussian(0.6), &d, &x);
        let view = b.query(0);
        let p = CodingParams { n_local: 3, ..Default::default() };
        let w = mat(2, 5, 43);
        let zero = DMatrix::zeros(2, 5);
        let t = DVector::from_vec(vec![1.0, 0.0]);
        let plain = encode_kllc_exact(&view, &p, None).unwrap();
        let a0 = Augmentation { g: &w, target: &t, eta: 0.0 };
        assert_eq!(encode_kllc_exact(&view, &p, Some(&a0)).unwrap(), plain);
        let az = Augmentation { g: &zero, target: &t, eta: 3.0 };
        assert_relative_eq!(encode_kllc_exact(&view, &p, Some(&az)).unwrap(), plain, epsilon = 1e-12);
        // The augmented constant shifts C by a multiple of 11', which leaves the
        // affine-constrained minimizer alone but changes a trace-scaled ridge.
        let p = CodingParams { eps_llc: 0.0, ..p };
        let plain = encode_kllc_approx(&view, &p, None).unwrap().0;
        assert_relative_eq!(encode_kllc_approx(&view, &p, Some(&az)).unwrap().0, plain, epsilon = 1e-10);
    }

    #[test]
    fn batch_encoding() {
        let d = mat(3, 4, 51);
        let empty = bundle(&gaussian(1.0), &d, &DMatrix::zeros(3, 0));
        let codes = encode_batch(&empty, &CodingParams::default(), Scheme::Ksc).unwrap();
        assert_eq!(codes.y.shape(), (4, 0));

        let own = bundle(&gaussian(1.0), &d, &d);
        let codes = encode_batch(&own, &CodingParams::default(), Scheme::HardBow).unwrap();
        assert_eq!(codes.y, DMatrix::identity(4, 4));
        codes.check_constraint().unwrap();

        let x = mat(3, 7, 52);
        let b = bundle(&gaussian(1.0), &d, &x);
        let p = CodingParams { n_local: 3, ..Default::default() };
        for scheme in [Scheme::HardBow, Scheme::SoftBow, Scheme::Ksc, Scheme::LlcExact, Scheme::LlcApprox] {
            let codes = encode_batch(&b, &p, scheme).unwrap();
            codes.check_constraint().unwrap();
            let enc = BatchEncoder::new(&b, &p, scheme).unwrap();
            for q in 0..7 {
                assert_eq!(codes.y.column(q).into_owned(), enc.encode(q).unwrap().0);
            }
        }
    }
}
