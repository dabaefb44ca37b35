//! Kernel parameter and kernel weight learning.
//!
//! With the codes held fixed, the kernel is chosen to minimize the mean
//! reconstruction error divided by the mean pairwise feature-space distance
//! between atoms. The normalization rules out the trivial solution in which
//! every sample maps to the same point.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::coders::{encode_batch, CodingParams, Scheme};
use crate::dictlearn::{Atoms, DualDictionary};
use crate::error::{Error, Result};
use crate::kernels::{congruence, gram_matrix, gram_self, gram_with_beta_grad, self_similarity, BaseKernel, KernelSpec, Samples};
use crate::numerics::project_simplex;

/// Discrepancies at or below this fraction of the mean atom self-similarity
/// count as a collapsed dictionary.
pub const COLLAPSE_RELATIVE: f64 = 1e-8;

/// Absolute floor of the collapse test.
pub const COLLAPSE_ABSOLUTE: f64 = 1e-14;

/// Kernel blocks the ratio objective depends on.
#[derive(Debug, Clone)]
struct Blocks {
    /// `N x N`
    kdd: DMatrix<f64>,
    /// `N x M`
    kdx: DMatrix<f64>,
    /// `M`
    kxx: DVector<f64>,
}

fn check_codes(dict: &DualDictionary, x: &Samples, y: &DMatrix<f64>) -> Result<()> {
    if y.nrows() != dict.len() {
        return Err(Error::DimensionMismatch { context: "code rows vs atoms", expected: dict.len(), found: y.nrows() });
    }
    if y.ncols() != x.len() {
        return Err(Error::DimensionMismatch { context: "code columns vs samples", expected: x.len(), found: y.ncols() });
    }
    if let Atoms::Dual(a) = &dict.atoms {
        if a.nrows() != x.len() {
            return Err(Error::DimensionMismatch {
                context: "coefficient rows vs training samples",
                expected: x.len(),
                found: a.nrows(),
            });
        }
    }
    Ok(())
}

fn dual_blocks(a: &DMatrix<f64>, k: &DMatrix<f64>) -> Blocks {
    let ka = k * a;
    Blocks { kdd: congruence(a, &ka), kdx: ka.transpose(), kxx: k.diagonal() }
}

fn blocks(spec: &KernelSpec, dict: &DualDictionary, x: &Samples) -> Result<Blocks> {
    Ok(match &dict.atoms {
        Atoms::Explicit(d) => Blocks {
            kdd: gram_self(spec, d)?,
            kdx: gram_matrix(spec, d, x)?,
            kxx: self_similarity(spec, x)?,
        },
        Atoms::Dual(a) => dual_blocks(a, &gram_self(spec, x)?),
    })
}

/// Blocks and their derivatives in the kernel's `beta`.
fn blocks_with_grad(kernel: &BaseKernel, dict: &DualDictionary, x: &Samples) -> Result<(Blocks, Blocks)> {
    Ok(match &dict.atoms {
        Atoms::Explicit(d) => {
            let (kdd, dkdd) = gram_with_beta_grad(kernel, d, d)?;
            let (kdx, dkdx) = gram_with_beta_grad(kernel, d, x)?;
            let (kxx, dkxx) = gram_with_beta_grad(kernel, x, x)?;
            (
                Blocks { kdd, kdx, kxx: kxx.diagonal() },
                Blocks { kdd: dkdd, kdx: dkdx, kxx: dkxx.diagonal() },
            )
        }
        Atoms::Dual(a) => {
            let (k, dk) = gram_with_beta_grad(kernel, x, x)?;
            (dual_blocks(a, &k), dual_blocks(a, &dk))
        }
    })
}

/// `(1/M) sum_i k(x_i,x_i) - 2 y_i'k(x_i,D) + y_i'K(D,D)y_i`; linear in the blocks.
fn numerator(b: &Blocks, y: &DMatrix<f64>) -> f64 {
    let m = y.ncols();
    if m == 0 {
        return 0.0;
    }
    let ky = &b.kdd * y;
    let total: f64 = (0..m)
        .map(|i| {
            let yi = y.column(i);
            b.kxx[i] - 2.0 * yi.dot(&b.kdx.column(i)) + yi.dot(&ky.column(i))
        })
        .sum();
    total / m as f64
}

/// `(1/N^2) sum_ij K_ii - 2 K_ij + K_jj`; linear in `K(D, D)`.
fn raw_discrepancy(kdd: &DMatrix<f64>) -> f64 {
    let n = kdd.nrows() as f64;
    2.0 * kdd.trace() / n - 2.0 * kdd.sum() / (n * n)
}

fn collapse_threshold(kdd: &DMatrix<f64>) -> f64 {
    let mean_diag = kdd.trace() / kdd.nrows() as f64;
    (COLLAPSE_RELATIVE * mean_diag.abs()).max(COLLAPSE_ABSOLUTE)
}

/// Mean squared feature-space distance between atoms given `K(D, D)`.
pub fn discrepancy_from_gram(kdd: &DMatrix<f64>) -> Result<f64> {
    if kdd.nrows() < 2 {
        return Err(Error::InvalidParameter("the discrepancy needs at least two atoms".into()));
    }
    let j = raw_discrepancy(kdd);
    if j <= collapse_threshold(kdd) {
        return Err(Error::CollapsedDictionary { discrepancy: j });
    }
    Ok(j)
}

/// Mean squared feature-space distance between the atoms of `dict`.
pub fn discrepancy(spec: &KernelSpec, dict: &DualDictionary, train: &Samples) -> Result<f64> {
    let kdd = match &dict.atoms {
        Atoms::Explicit(d) => gram_self(spec, d)?,
        Atoms::Dual(a) => {
            let k = gram_self(spec, train)?;
            congruence(a, &(k * a))
        }
    };
    discrepancy_from_gram(&kdd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioObjective {
    pub numerator: f64,
    pub denominator: f64,
    pub value: f64,
}

fn ratio(b: &Blocks, y: &DMatrix<f64>) -> Result<RatioObjective> {
    let denominator = discrepancy_from_gram(&b.kdd)?;
    let numerator = numerator(b, y);
    Ok(RatioObjective { numerator, denominator, value: numerator / denominator })
}

/// Mean reconstruction error of the fixed codes `y` (one column per sample
/// of `x`) divided by the atom discrepancy.
pub fn eval_ratio(spec: &KernelSpec, dict: &DualDictionary, x: &Samples, y: &DMatrix<f64>) -> Result<RatioObjective> {
    check_codes(dict, x, y)?;
    ratio(&blocks(spec, dict, x)?, y)
}

fn learnable(spec: &KernelSpec) -> Result<BaseKernel> {
    match spec {
        KernelSpec::Base(b) if b.beta().is_some() => Ok(*b),
        other => Err(Error::NotLearnable(other.to_string())),
    }
}

/// Ratio and its derivative in `beta`.
fn ratio_and_grad(kernel: &BaseKernel, dict: &DualDictionary, x: &Samples, y: &DMatrix<f64>) -> Result<(RatioObjective, f64)> {
    let (b, db) = blocks_with_grad(kernel, dict, x)?;
    let r = ratio(&b, y)?;
    let dn = numerator(&db, y);
    let dj = raw_discrepancy(&db.kdd);
    let grad = (dn * r.denominator - r.numerator * dj) / (r.denominator * r.denominator);
    Ok((r, grad))
}

/// Derivative of the ratio objective in the kernel's `beta`.
pub fn grad_beta(spec: &KernelSpec, dict: &DualDictionary, x: &Samples, y: &DMatrix<f64>) -> Result<f64> {
    check_codes(dict, x, y)?;
    Ok(ratio_and_grad(&learnable(spec)?, dict, x, y)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentOptions {
    pub max_iter: usize,
    /// Stop once `|dF| / |F|` drops below this.
    pub tol: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions { max_iter: 50, tol: 1e-6 }
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const STATIONARY: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct BetaFit {
    #[serde(serialize_with = "serialize_display")]
    pub spec: KernelSpec,
    /// Ratio objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub betas: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn serialize_display<S: serde::Serializer>(v: &KernelSpec, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// Backtracking gradient descent on `log(beta)`.
pub fn optimize_beta(
    spec: &KernelSpec,
    dict: &DualDictionary,
    x: &Samples,
    y: &DMatrix<f64>,
    opts: &DescentOptions,
) -> Result<BetaFit> {
    check_codes(dict, x, y)?;
    let mut kernel = learnable(spec)?;
    let mut theta = kernel.beta().expect("learnable").ln();
    let (r, g) = ratio_and_grad(&kernel, dict, x, y)?;
    let mut f = r.value;
    let mut grad = g * theta.exp();
    let mut fit = BetaFit {
        spec: KernelSpec::Base(kernel),
        trace: vec![f],
        betas: vec![theta.exp()],
        iterations: 0,
        converged: false,
    };
    let mut step = (1.0 / grad.abs()).min(1.0);
    for it in 1..=opts.max_iter {
        fit.iterations = it;
        if grad.abs() < STATIONARY {
            fit.converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand_theta = theta - step * grad;
            let cand = kernel.with_beta(cand_theta.exp())?;
            if cand.validate().is_ok() {
                // Collapsed or overflowing candidates are rejected like any
                // other insufficient decrease.
                if let Ok((r, g)) = ratio_and_grad(&cand, dict, x, y) {
                    if r.value.is_finite() && r.value <= f - ARMIJO * step * grad * grad {
                        accepted = Some((cand_theta, cand, r.value, g));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((t, k, fv, g)) = accepted else {
            fit.converged = true;
            break;
        };
        let previous = f;
        theta = t;
        kernel = k;
        f = fv;
        grad = g * theta.exp();
        step *= 2.0;
        fit.trace.push(f);
        fit.betas.push(theta.exp());
        if ((previous - f) / previous.abs().max(f64::MIN_POSITIVE)).abs() < opts.tol {
            fit.converged = true;
            break;
        }
    }
    fit.spec = KernelSpec::Base(kernel);
    Ok(fit)
}

#[derive(Debug, Clone, Serialize)]
pub struct MklFit {
    pub alpha: Vec<f64>,
    #[serde(serialize_with = "serialize_display")]
    pub spec: KernelSpec,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Weighted-sum kernel over `bases` with weights `alpha`.
pub fn combine(bases: &[BaseKernel], alpha: &[f64]) -> KernelSpec {
    KernelSpec::Combination(bases.iter().copied().zip(alpha.iter().copied()).collect())
}

/// Projected gradient descent of the ratio objective over kernel weights on
/// the probability simplex.
pub fn optimize_mkl(
    bases: &[BaseKernel],
    dict: &DualDictionary,
    x: &Samples,
    y: &DMatrix<f64>,
    opts: &DescentOptions,
) -> Result<MklFit> {
    check_codes(dict, x, y)?;
    let l = bases.len();
    if l == 0 {
        return Err(Error::EmptyInput("base kernels"));
    }
    if dict.len() < 2 {
        return Err(Error::InvalidParameter("the discrepancy needs at least two atoms".into()));
    }
    if l == 1 {
        let value = eval_ratio(&combine(bases, &[1.0]), dict, x, y)?.value;
        return Ok(MklFit {
            alpha: vec![1.0],
            spec: combine(bases, &[1.0]),
            trace: vec![value],
            iterations: 0,
            converged: true,
        });
    }
    // Numerator and discrepancy are linear in the kernel, so each base
    // contributes a fixed pair (n_l, j_l) and F(alpha) = alpha'n / alpha'j.
    let mut nums = DVector::zeros(l);
    let mut dens = DVector::zeros(l);
    let mut thresholds = DVector::zeros(l);
    for (i, b) in bases.iter().enumerate() {
        let blk = blocks(&KernelSpec::Base(*b), dict, x)?;
        nums[i] = numerator(&blk, y);
        dens[i] = raw_discrepancy(&blk.kdd);
        thresholds[i] = collapse_threshold(&blk.kdd);
    }
    if (0..l).all(|i| dens[i] <= thresholds[i]) {
        return Err(Error::CollapsedDictionary { discrepancy: dens.max() });
    }
    let value = |a: &DVector<f64>| -> f64 {
        let j = a.dot(&dens);
        if j <= a.dot(&thresholds) {
            f64::INFINITY
        } else {
            a.dot(&nums) / j
        }
    };
    let mut alpha = DVector::from_element(l, 1.0 / l as f64);
    let mut f = value(&alpha);
    if !f.is_finite() {
        // Uniform weights collapse: start from the best admissible vertex.
        let best = (0..l)
            .filter(|&i| dens[i] > thresholds[i])
            .min_by(|&a, &b| (nums[a] / dens[a]).total_cmp(&(nums[b] / dens[b])))
            .expect("some base is admissible");
        alpha = DVector::from_fn(l, |i, _| if i == best { 1.0 } else { 0.0 });
        f = value(&alpha);
    }
    let mut fit = MklFit { alpha: vec![], spec: combine(bases, &[]), trace: vec![f], iterations: 0, converged: false };
    let mut step = 1.0;
    for it in 1..=opts.max_iter {
        fit.iterations = it;
        let j = alpha.dot(&dens);
        let n = alpha.dot(&nums);
        let grad = (&nums * j - &dens * n) / (j * j);
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = project_simplex(&(&alpha - step * &grad));
            let moved = &cand - &alpha;
            if moved.amax() == 0.0 {
                break;
            }
            let fc = value(&cand);
            if fc.is_finite() && fc <= f + ARMIJO * grad.dot(&moved) && fc <= f {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            fit.converged = true;
            break;
        };
        let previous = f;
        alpha = cand;
        f = fc;
        step *= 2.0;
        fit.trace.push(f);
        if ((previous - f) / previous.abs().max(f64::MIN_POSITIVE)).abs() < opts.tol {
            fit.converged = true;
            break;
        }
    }
    fit.alpha = alpha.iter().copied().collect();
    fit.spec = combine(bases, &fit.alpha);
    Ok(fit)
}

/// Which kernel parameters an alternating kernel fit learns.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelTarget {
    /// The `beta` of a single base kernel.
    Beta(KernelSpec),
    /// Simplex weights over base kernels.
    Weights(Vec<BaseKernel>),
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelRound {
    /// Ratio objective before and after the kernel step of the round.
    pub trace: Vec<f64>,
    #[serde(serialize_with = "serialize_display")]
    pub spec: KernelSpec,
}

/// Alternates coding of `x` over the fixed dictionary `dict` with kernel
/// updates at fixed codes, for `rounds` rounds.
pub fn fit_kernel(
    target: &KernelTarget,
    dict: &DualDictionary,
    x: &Samples,
    scheme: Scheme,
    params: &CodingParams,
    rounds: usize,
    opts: &DescentOptions,
) -> Result<(KernelSpec, Vec<KernelRound>)> {
    let mut spec = match target {
        KernelTarget::Beta(s) => s.clone(),
        KernelTarget::Weights(b) => combine(b, &vec![1.0 / b.len().max(1) as f64; b.len()]),
    };
    let mut history = Vec::new();
    for _ in 0..rounds {
        let codes = encode_batch(&dict.bundle(&spec, x, x)?, params, scheme)?;
        let y = crate::dictlearn::masked_codes(&codes)?;
        let (next, trace) = match target {
            KernelTarget::Beta(_) => {
                let f = optimize_beta(&spec, dict, x, &y, opts)?;
                (f.spec, f.trace)
            }
            KernelTarget::Weights(b) => {
                let f = optimize_mkl(b, dict, x, &y, opts)?;
                (f.spec, f.trace)
            }
        };
        spec = next;
        history.push(KernelRound { trace, spec: spec.clone() });
    }
    Ok((spec, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_circles;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(beta: f64) -> KernelSpec {
        KernelSpec::Base(BaseKernel::Gaussian { beta })
    }

    fn vectors(d: usize, n: usize, seed: u64) -> Samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Samples::Vectors(DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0)))
    }

    fn line(points: &[f64]) -> Samples {
        Samples::Vectors(DMatrix::from_row_slice(1, points.len(), points))
    }

    #[test]
    fn discrepancy_examples() {
        let same = DualDictionary::explicit(line(&[0.5, 0.5]));
        assert!(matches!(discrepancy(&gaussian(1.0), &same, &line(&[])), Err(Error::CollapsedDictionary { .. })));
        let two = DualDictionary::explicit(line(&[0.0, 1.0]));
        assert_relative_eq!(discrepancy(&gaussian(1.0), &two, &line(&[])).unwrap(), 1.0 - (-1.0f64).exp(), epsilon = 1e-15);
        let four = DualDictionary::explicit(line(&[0.0, 10.0, 20.0, 30.0]));
        // Off-diagonal kernel values vanish: every ordered pair i != j adds 2.
        assert_relative_eq!(discrepancy(&gaussian(100.0), &four, &line(&[])).unwrap(), 1.5, epsilon = 1e-15);
        let one = DualDictionary::explicit(line(&[0.0]));
        assert!(discrepancy(&gaussian(1.0), &one, &line(&[])).is_err());
    }

    #[test]
    fn tiny_beta_is_reported_as_collapse() {
        let d = DualDictionary::explicit(vectors(3, 5, 1));
        let x = vectors(3, 4, 2);
        let y = DMatrix::from_element(5, 4, 0.2);
        assert!(matches!(eval_ratio(&gaussian(1e-12), &d, &x, &y), Err(Error::CollapsedDictionary { .. })));
    }

    #[test]
    fn exact_reconstruction_gives_zero_ratio() {
        let atoms = vectors(2, 3, 3);
        let d = DualDictionary::explicit(atoms.clone());
        let y = DMatrix::identity(3, 3);
        let r = eval_ratio(&KernelSpec::Base(BaseKernel::Linear), &d, &atoms, &y).unwrap();
        assert!(r.numerator.abs() <= 1e-14);
        let x = line(&[0.3]);
        let d = DualDictionary::explicit(line(&[0.3, -1.0]));
        let y = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(eval_ratio(&gaussian(2.0), &d, &x, &y).unwrap().value, 0.0);
        assert_eq!(grad_beta(&gaussian(2.0), &d, &x, &y).unwrap(), 0.0);
    }

    #[test]
    fn ratio_matches_term_by_term_oracle() {
        let spec = gaussian(0.7);
        let Samples::Vectors(dm) = vectors(3, 4, 4) else { unreachable!() };
        let Samples::Vectors(xm) = vectors(3, 5, 5) else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = DMatrix::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0));
        let k = |a: nalgebra::DVectorView<f64>, b: nalgebra::DVectorView<f64>| (-0.7 * (a - b).norm_squared()).exp();
        let mut num = 0.0;
        for i in 0..5 {
            let mut e = k(xm.column(i), xm.column(i));
            for p in 0..4 {
                e -= 2.0 * y[(p, i)] * k(xm.column(i), dm.column(p));
                for q in 0..4 {
                    e += y[(p, i)] * y[(q, i)] * k(dm.column(p), dm.column(q));
                }
            }
            num += e;
        }
        num /= 5.0;
        let mut den = 0.0;
        for p in 0..4 {
            for q in 0..4 {
                den += 2.0 - 2.0 * k(dm.column(p), dm.column(q));
            }
        }
        den /= 16.0;
        let r = eval_ratio(&spec, &DualDictionary::explicit(Samples::Vectors(dm)), &Samples::Vectors(xm), &y).unwrap();
        assert_relative_eq!(r.numerator, num, epsilon = 1e-12);
        assert_relative_eq!(r.denominator, den, epsilon = 1e-12);
        assert_relative_eq!(r.value, num / den, epsilon = 1e-12);
    }

    #[test]
    fn dual_ratio_matches_explicit_for_selection_dictionaries() {
        let x = vectors(2, 6, 7);
        let mut a = DMatrix::zeros(6, 3);
        for (j, i) in [4, 0, 2].iter().enumerate() {
            a[(*i, j)] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let spec = gaussian(1.3);
        let dual = eval_ratio(&spec, &DualDictionary::dual(a), &x, &y).unwrap();
        let explicit = eval_ratio(&spec, &DualDictionary::explicit(x.select(&[4, 0, 2])), &x, &y).unwrap();
        assert_relative_eq!(dual.value, explicit.value, epsilon = 1e-13);
        let g1 = grad_beta(&spec, &DualDictionary::dual(DMatrix::identity(6, 6).select_columns(&[4, 0, 2])), &x, &y).unwrap();
        let g2 = grad_beta(&spec, &DualDictionary::explicit(x.select(&[4, 0, 2])), &x, &y).unwrap();
        assert_relative_eq!(g1, g2, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let beta = rng.random_range(0.2..3.0);
            let d = DualDictionary::explicit(vectors(3, 4, 200 + seed));
            let x = vectors(3, 6, 300 + seed);
            let y = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
            let g = grad_beta(&gaussian(beta), &d, &x, &y).unwrap();
            let h = 1e-6 * beta;
            let fp = eval_ratio(&gaussian(beta + h), &d, &x, &y).unwrap().value;
            let fm = eval_ratio(&gaussian(beta - h), &d, &x, &y).unwrap().value;
            let fd = (fp - fm) / (2.0 * h);
            assert!((g - fd).abs() <= 1e-5 * fd.abs().max(1e-8), "seed {seed}: {g} vs {fd}");
        }
    }

    #[test]
    fn gradient_matches_two_atom_closed_form() {
        // Atoms at -a and a, one sample at 0 coded as (1/2, 1/2).
        let a: f64 = 0.8;
        let beta: f64 = 0.9;
        let d = DualDictionary::explicit(line(&[-a, a]));
        let x = line(&[0.0]);
        let y = DMatrix::from_column_slice(2, 1, &[0.5, 0.5]);
        let (e1, e4) = ((-beta * a * a).exp(), (-4.0 * beta * a * a).exp());
        let n = 1.5 - 2.0 * e1 + 0.5 * e4;
        let j = 1.0 - e4;
        let dn = 2.0 * a * a * e1 - 2.0 * a * a * e4;
        let dj = 4.0 * a * a * e4;
        let expected = (dn * j - n * dj) / (j * j);
        assert_relative_eq!(eval_ratio(&gaussian(beta), &d, &x, &y).unwrap().value, n / j, epsilon = 1e-14);
        assert_relative_eq!(grad_beta(&gaussian(beta), &d, &x, &y).unwrap(), expected, epsilon = 1e-13);
    }

    #[test]
    fn learnability_checks() {
        let d = DualDictionary::explicit(vectors(2, 3, 9));
        let x = vectors(2, 2, 10);
        let y = DMatrix::zeros(3, 2);
        assert!(matches!(grad_beta(&KernelSpec::Base(BaseKernel::Linear), &d, &x, &y), Err(Error::NotLearnable(_))));
        assert!(grad_beta(&gaussian(1.0), &d, &x, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn stationary_start_keeps_beta() {
        let d = DualDictionary::explicit(line(&[0.3, -1.0]));
        let x = line(&[0.3]);
        let y = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let fit = optimize_beta(&gaussian(2.0), &d, &x, &y, &DescentOptions::default()).unwrap();
        assert_eq!(fit.spec, gaussian(2.0));
        assert_eq!(fit.trace.len(), 1);
    }

    fn circle_problem() -> (DualDictionary, Samples, DMatrix<f64>) {
        let data = gen_circles(20, &[1.0, 3.0], 0.1, 11).unwrap();
        let atoms = data.samples.select(&[0, 5, 10, 15, 20, 25, 30, 35]);
        let dict = DualDictionary::explicit(atoms);
        let params = CodingParams { gamma: 0.05, ..Default::default() };
        let codes = encode_batch(&dict.bundle(&gaussian(1.0), &data.samples, &data.samples).unwrap(), &params, Scheme::Ksc).unwrap();
        (dict, data.samples, codes.y)
    }

    #[test]
    fn beta_descent_finds_the_grid_basin() {
        let (dict, x, y) = circle_problem();
        let grid: Vec<(f64, f64)> = (-30..=30)
            .map(|k| 10f64.powf(k as f64 / 10.0))
            .filter_map(|b| eval_ratio(&gaussian(b), &dict, &x, &y).ok().map(|r| (b, r.value)))
            .collect();
        let (best_beta, best) = grid.iter().cloned().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!(best_beta > 1e-3 && best_beta < 1e3, "grid minimum at the boundary: {best_beta}");
        let start = 100.0 * best_beta;
        let fit = optimize_beta(&gaussian(start), &dict, &x, &y, &DescentOptions { max_iter: 200, tol: 1e-10 }).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let f0 = fit.trace[0];
        let f1 = *fit.trace.last().unwrap();
        assert!(f1 <= 0.9 * f0, "{f0} -> {f1}");
        assert!(f1 <= best * 1.05, "{f1} vs grid {best}");
    }

    #[test]
    fn mkl_single_kernel_is_the_base_kernel() {
        let (dict, x, y) = circle_problem();
        let base = BaseKernel::Gaussian { beta: 1.0 };
        let fit = optimize_mkl(&[base], &dict, &x, &y, &DescentOptions::default()).unwrap();
        assert_eq!(fit.alpha, vec![1.0]);
        assert_eq!(gram_self(&fit.spec, &x).unwrap(), gram_self(&KernelSpec::Base(base), &x).unwrap());
        assert_eq!(fit.trace[0], eval_ratio(&KernelSpec::Base(base), &dict, &x, &y).unwrap().value);
    }

    #[test]
    fn mkl_identical_bases_match_single_kernel_value() {
        let (dict, x, y) = circle_problem();
        let base = BaseKernel::Gaussian { beta: 0.5 };
        let fit = optimize_mkl(&[base, base], &dict, &x, &y, &DescentOptions::default()).unwrap();
        assert!(fit.alpha.iter().all(|&a| a >= -1e-14));
        assert!((fit.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let single = eval_ratio(&KernelSpec::Base(base), &dict, &x, &y).unwrap().value;
        assert_relative_eq!(*fit.trace.last().unwrap(), single, max_relative = 1e-12);
    }

    #[test]
    fn mkl_prefers_the_kernel_that_reconstructs() {
        // Codes reconstruct every sample exactly in input space, so the
        // linear kernel has zero numerator.
        let atoms = vectors(2, 2, 12);
        let Samples::Vectors(dm) = &atoms else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let y = DMatrix::from_fn(2, 8, |_, _| rng.random_range(-1.0..1.0));
        let x = Samples::Vectors(dm * &y);
        let dict = DualDictionary::explicit(atoms);
        let bases = [BaseKernel::Linear, BaseKernel::Gaussian { beta: 1.0 }];
        let fit = optimize_mkl(&bases, &dict, &x, &y, &DescentOptions { max_iter: 100, tol: 1e-12 }).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let f = |a: f64| eval_ratio(&combine(&bases, &[a, 1.0 - a]), &dict, &x, &y).unwrap().value;
        let grid_best = (0..=100).map(|k| f(k as f64 / 100.0)).fold(f64::INFINITY, f64::min);
        assert!(fit.alpha[0] > 0.99, "{:?}", fit.alpha);
        assert!(*fit.trace.last().unwrap() <= 0.9 * fit.trace[0]);
        assert!(*fit.trace.last().unwrap() <= grid_best + 1e-12);
    }

    #[test]
    fn mkl_errors_when_every_base_collapses() {
        let d = DualDictionary::explicit(line(&[0.5, 0.5]));
        let x = line(&[0.0]);
        let y = DMatrix::from_column_slice(2, 1, &[0.5, 0.5]);
        let bases = [BaseKernel::Gaussian { beta: 1.0 }, BaseKernel::Linear];
        assert!(matches!(optimize_mkl(&bases, &d, &x, &y, &DescentOptions::default()), Err(Error::CollapsedDictionary { .. })));
    }

    #[test]
    fn kernel_rounds_do_not_increase_the_ratio() {
        let (dict, x, _) = circle_problem();
        let params = CodingParams { gamma: 0.05, ..Default::default() };
        let (spec, rounds) = fit_kernel(&KernelTarget::Beta(gaussian(20.0)), &dict, &x, Scheme::Ksc, &params, 3, &DescentOptions::default()).unwrap();
        assert_eq!(rounds.len(), 3);
        for r in &rounds {
            assert!(r.trace.last().unwrap() <= &r.trace[0]);
        }
        assert_ne!(spec, gaussian(20.0));
    }
}
