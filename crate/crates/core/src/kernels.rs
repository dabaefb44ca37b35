//! Kernel families, Gram matrices and the cached kernel values consumed by
//! the encoders.
//!
//! Samples are either plain feature vectors (columns of a `d x M` matrix) or
//! symmetric positive-definite descriptors. The log-Euclidean RBF kernel is
//! the only family defined on descriptors; every other family expects
//! vectors.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Eigenvalue floor below which a descriptor is rejected as not SPD.
pub const SPD_EIGEN_FLOOR: f64 = 1e-12;

/// A single (non-combined) kernel family with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseKernel {
    /// `a.b`
    Linear,
    /// `exp(-beta |a - b|^2)`
    Gaussian { beta: f64 },
    /// `(1 + beta a.b)^degree`
    Polynomial { beta: f64, degree: u32 },
    /// `tanh(scale a.b + offset)`; not positive semi-definite in general.
    Sigmoid { scale: f64, offset: f64 },
    /// `exp(-beta |log(A) - log(B)|_F^2)` on SPD descriptors.
    LogEuclidean { beta: f64 },
}

/// A kernel: one family, or a nonnegative weighted sum of base families.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Base(BaseKernel),
    Combination(Vec<(BaseKernel, f64)>),
}

impl From<BaseKernel> for KernelSpec {
    fn from(base: BaseKernel) -> Self {
        KernelSpec::Base(base)
    }
}

/// Symmetric positive-definite matrix together with its matrix logarithm.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdDescriptor {
    matrix: DMatrix<f64>,
    log: DMatrix<f64>,
}

impl SpdDescriptor {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n == 0 || matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "SPD descriptor must be square",
                expected: n,
                found: matrix.ncols(),
            });
        }
        let asym = max_asymmetry(&matrix);
        let scale = matrix.amax().max(1.0);
        if asym > 1e-10 * scale {
            return Err(Error::NotSymmetric { max_asymmetry: asym });
        }
        let eig = SymmetricEigen::new(matrix.clone());
        let min = eig.eigenvalues.min();
        if !(min > SPD_EIGEN_FLOOR) {
            return Err(Error::NotSpd { min_eigenvalue: min });
        }
        let logs = eig.eigenvalues.map(f64::ln);
        let log = symmetric_from_fn(n, |i, j| {
            (0..n)
                .map(|k| eig.eigenvectors[(i, k)] * logs[k] * eig.eigenvectors[(j, k)])
                .sum()
        });
        Ok(SpdDescriptor { matrix, log })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Matrix logarithm computed through the symmetric eigendecomposition.
    pub fn log(&self) -> &DMatrix<f64> {
        &self.log
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Borrowed view of one sample.
#[derive(Debug, Clone, Copy)]
pub enum Sample<'a> {
    Vector(&'a [f64]),
    Spd(&'a SpdDescriptor),
}

/// An ordered set of samples of a single kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    /// One sample per column.
    Vectors(DMatrix<f64>),
    Spd(Vec<SpdDescriptor>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Vectors(m) => m.ncols(),
            Samples::Spd(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Vector length, or the side of the descriptor matrices.
    pub fn dim(&self) -> usize {
        match self {
            Samples::Vectors(m) => m.nrows(),
            Samples::Spd(v) => v.first().map_or(0, SpdDescriptor::dim),
        }
    }

    pub fn get(&self, i: usize) -> Sample<'_> {
        match self {
            Samples::Vectors(m) => {
                let d = m.nrows();
                Sample::Vector(&m.as_slice()[i * d..(i + 1) * d])
            }
            Samples::Spd(v) => Sample::Spd(&v[i]),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Samples {
        match self {
            Samples::Vectors(m) => Samples::Vectors(m.select_columns(indices)),
            Samples::Spd(v) => Samples::Spd(indices.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Samples::Vectors(_) => "vectors",
            Samples::Spd(_) => "SPD descriptors",
        }
    }
}

impl BaseKernel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaseKernel::Gaussian { beta } | BaseKernel::LogEuclidean { beta } => {
                if !(beta > 0.0) || !beta.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "{self}: beta must be positive and finite"
                    )));
                }
            }
            BaseKernel::Polynomial { beta, degree } => {
                if degree == 0 || !beta.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "{self}: degree must be >= 1 and beta finite"
                    )));
                }
            }
            BaseKernel::Sigmoid { scale, offset } => {
                if !scale.is_finite() || !offset.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "{self}: parameters must be finite"
                    )));
                }
            }
            BaseKernel::Linear => {}
        }
        Ok(())
    }

    fn wants_spd(&self) -> bool {
        matches!(self, BaseKernel::LogEuclidean { .. })
    }

    /// The learnable width/scale parameter, when the family has one.
    pub fn beta(&self) -> Option<f64> {
        match *self {
            BaseKernel::Gaussian { beta }
            | BaseKernel::LogEuclidean { beta }
            | BaseKernel::Polynomial { beta, .. } => Some(beta),
            _ => None,
        }
    }

    pub fn with_beta(&self, beta: f64) -> Result<BaseKernel> {
        match *self {
            BaseKernel::Gaussian { .. } => Ok(BaseKernel::Gaussian { beta }),
            BaseKernel::LogEuclidean { .. } => Ok(BaseKernel::LogEuclidean { beta }),
            BaseKernel::Polynomial { degree, .. } => Ok(BaseKernel::Polynomial { beta, degree }),
            _ => Err(Error::NotLearnable(self.to_string())),
        }
    }

    fn eval_unchecked(&self, a: Sample<'_>, b: Sample<'_>) -> f64 {
        match (*self, a, b) {
            (BaseKernel::Linear, Sample::Vector(a), Sample::Vector(b)) => dot(a, b),
            (BaseKernel::Gaussian { beta }, Sample::Vector(a), Sample::Vector(b)) => {
                (-beta * sq_dist(a, b)).exp()
            }
            (BaseKernel::Polynomial { beta, degree }, Sample::Vector(a), Sample::Vector(b)) => {
                (1.0 + beta * dot(a, b)).powi(degree as i32)
            }
            (BaseKernel::Sigmoid { scale, offset }, Sample::Vector(a), Sample::Vector(b)) => {
                (scale * dot(a, b) + offset).tanh()
            }
            (BaseKernel::LogEuclidean { beta }, Sample::Spd(a), Sample::Spd(b)) => {
                (-beta * sq_dist(a.log.as_slice(), b.log.as_slice())).exp()
            }
            _ => unreachable!("sample kinds are checked before evaluation"),
        }
    }

    /// Kernel value and its derivative with respect to `beta`.
    fn eval_with_beta_grad_unchecked(&self, a: Sample<'_>, b: Sample<'_>) -> (f64, f64) {
        match (*self, a, b) {
            (BaseKernel::Gaussian { beta }, Sample::Vector(a), Sample::Vector(b)) => {
                let s = sq_dist(a, b);
                let k = (-beta * s).exp();
                (k, -s * k)
            }
            (BaseKernel::LogEuclidean { beta }, Sample::Spd(a), Sample::Spd(b)) => {
                let s = sq_dist(a.log.as_slice(), b.log.as_slice());
                let k = (-beta * s).exp();
                (k, -s * k)
            }
            (BaseKernel::Polynomial { beta, degree }, Sample::Vector(a), Sample::Vector(b)) => {
                let p = dot(a, b);
                let base = 1.0 + beta * p;
                let k = base.powi(degree as i32);
                let dk = degree as f64 * p * base.powi(degree as i32 - 1);
                (k, dk)
            }
            _ => (self.eval_unchecked(a, b), 0.0),
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Base(b) => b.validate(),
            KernelSpec::Combination(members) => {
                if members.is_empty() {
                    return Err(Error::InvalidParameter("empty kernel combination".into()));
                }
                for (b, w) in members {
                    b.validate()?;
                    if !(*w >= 0.0) || !w.is_finite() {
                        return Err(Error::InvalidParameter(format!(
                            "combination weight {w} must be nonnegative and finite"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    fn members(&self) -> Vec<&BaseKernel> {
        match self {
            KernelSpec::Base(b) => vec![b],
            KernelSpec::Combination(m) => m.iter().map(|(b, _)| b).collect(),
        }
    }

    fn check_samples(&self, s: &Samples) -> Result<()> {
        for b in self.members() {
            let ok = match s {
                Samples::Vectors(_) => !b.wants_spd(),
                Samples::Spd(_) => b.wants_spd(),
            };
            if !ok {
                return Err(Error::KindMismatch(format!(
                    "kernel {b} cannot be evaluated on {}",
                    s.kind()
                )));
            }
        }
        Ok(())
    }

    fn check_pair(&self, a: &Samples, b: &Samples) -> Result<()> {
        self.validate()?;
        self.check_samples(a)?;
        self.check_samples(b)?;
        if !a.is_empty() && !b.is_empty() && a.dim() != b.dim() {
            return Err(Error::DimensionMismatch {
                context: "kernel arguments",
                expected: a.dim(),
                found: b.dim(),
            });
        }
        if let Samples::Spd(v) = a {
            check_uniform_dim(v)?;
        }
        if let Samples::Spd(v) = b {
            check_uniform_dim(v)?;
        }
        Ok(())
    }

    fn eval_unchecked(&self, a: Sample<'_>, b: Sample<'_>) -> f64 {
        match self {
            KernelSpec::Base(k) => k.eval_unchecked(a, b),
            KernelSpec::Combination(members) => {
                let mut acc = 0.0;
                for (k, w) in members {
                    acc += w * k.eval_unchecked(a, b);
                }
                acc
            }
        }
    }
}

fn check_uniform_dim(v: &[SpdDescriptor]) -> Result<()> {
    if let Some(first) = v.first() {
        for d in v {
            if d.dim() != first.dim() {
                return Err(Error::DimensionMismatch {
                    context: "SPD descriptor set",
                    expected: first.dim(),
                    found: d.dim(),
                });
            }
        }
    }
    Ok(())
}

/// Evaluates `k(a, b)`.
pub fn eval_kernel(spec: &KernelSpec, a: Sample<'_>, b: Sample<'_>) -> Result<f64> {
    spec.validate()?;
    let (da, db) = match (a, b) {
        (Sample::Vector(x), Sample::Vector(y)) => (x.len(), y.len()),
        (Sample::Spd(x), Sample::Spd(y)) => (x.dim(), y.dim()),
        _ => return Err(Error::KindMismatch("vector paired with SPD descriptor".into())),
    };
    if da != db {
        return Err(Error::DimensionMismatch {
            context: "kernel arguments",
            expected: da,
            found: db,
        });
    }
    let wants_spd = matches!(a, Sample::Spd(_));
    for m in spec.members() {
        if m.wants_spd() != wants_spd {
            return Err(Error::KindMismatch(format!("kernel {m} on the given sample kind")));
        }
    }
    Ok(spec.eval_unchecked(a, b))
}

/// Gram matrix with entry `(i, j) = k(a_i, b_j)`.
///
/// Passing the same set twice yields an exactly symmetric matrix: each
/// unordered pair is evaluated once.
pub fn gram_matrix(spec: &KernelSpec, a: &Samples, b: &Samples) -> Result<DMatrix<f64>> {
    if std::ptr::eq(a, b) {
        return gram_self(spec, a);
    }
    spec.check_pair(a, b)?;
    let (na, nb) = (a.len(), b.len());
    let cols: Vec<Vec<f64>> = (0..nb)
        .into_par_iter()
        .map(|j| {
            let bj = b.get(j);
            (0..na).map(|i| spec.eval_unchecked(a.get(i), bj)).collect()
        })
        .collect();
    Ok(DMatrix::from_vec(na, nb, cols.concat()))
}

/// Symmetric Gram matrix `K(a, a)`, computed once per unordered pair.
pub fn gram_self(spec: &KernelSpec, a: &Samples) -> Result<DMatrix<f64>> {
    spec.check_pair(a, a)?;
    let n = a.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let aj = a.get(j);
            (0..=j).map(|i| spec.eval_unchecked(a.get(i), aj)).collect()
        })
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i <= j {
            upper[j][i]
        } else {
            upper[i][j]
        }
    }))
}

/// Self-similarities `k(a_i, a_i)`.
pub fn self_similarity(spec: &KernelSpec, a: &Samples) -> Result<DVector<f64>> {
    spec.check_pair(a, a)?;
    Ok(DVector::from_iterator(
        a.len(),
        (0..a.len()).map(|i| spec.eval_unchecked(a.get(i), a.get(i))),
    ))
}

/// Gram matrix of a base kernel together with its elementwise derivative
/// with respect to the kernel's `beta`.
pub fn gram_with_beta_grad(
    kernel: &BaseKernel,
    a: &Samples,
    b: &Samples,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if kernel.beta().is_none() {
        return Err(Error::NotLearnable(kernel.to_string()));
    }
    let spec = KernelSpec::Base(kernel.clone());
    spec.check_pair(a, b)?;
    let (na, nb) = (a.len(), b.len());
    let cols: Vec<Vec<(f64, f64)>> = (0..nb)
        .into_par_iter()
        .map(|j| {
            let bj = b.get(j);
            (0..na)
                .map(|i| kernel.eval_with_beta_grad_unchecked(a.get(i), bj))
                .collect()
        })
        .collect();
    let flat = cols.concat();
    let k = DMatrix::from_iterator(na, nb, flat.iter().map(|p| p.0));
    let dk = DMatrix::from_iterator(na, nb, flat.iter().map(|p| p.1));
    Ok((k, dk))
}

/// Cached kernel values for a dictionary and a batch of queries.
#[derive(Debug, Clone, PartialEq)]
pub struct GramBundle {
    /// `K(D, D)`, `N x N`, exactly symmetric.
    pub kdd: DMatrix<f64>,
    /// `k(x_q, D)` stacked as columns, `N x Q`.
    pub kxd: DMatrix<f64>,
    /// `k(x_q, x_q)`, length `Q`.
    pub kxx: DVector<f64>,
}

/// Kernel values seen by a single query.
#[derive(Debug, Clone)]
pub struct QueryGram<'a> {
    pub kdd: &'a DMatrix<f64>,
    pub kxd: DVector<f64>,
    pub kxx: f64,
}

impl GramBundle {
    pub fn new(kdd: DMatrix<f64>, kxd: DMatrix<f64>, kxx: DVector<f64>) -> Result<Self> {
        let n = kdd.nrows();
        if kdd.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "K(D,D) must be square",
                expected: n,
                found: kdd.ncols(),
            });
        }
        if kxd.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "k(x,D) rows vs atoms",
                expected: n,
                found: kxd.nrows(),
            });
        }
        if kxx.len() != kxd.ncols() {
            return Err(Error::DimensionMismatch {
                context: "k(x,x) entries vs queries",
                expected: kxd.ncols(),
                found: kxx.len(),
            });
        }
        Ok(GramBundle { kdd, kxd, kxx })
    }

    /// Bundle for an explicit dictionary.
    pub fn explicit(spec: &KernelSpec, atoms: &Samples, queries: &Samples) -> Result<Self> {
        let kdd = gram_self(spec, atoms)?;
        let kxd = gram_matrix(spec, atoms, queries)?;
        let kxx = self_similarity(spec, queries)?;
        GramBundle::new(kdd, kxd, kxx)
    }

    /// Bundle for the dictionary `Phi(D) = Phi(X) A` queried by the training
    /// samples themselves, given the training Gram `K(X, X)`.
    pub fn from_train_gram(kxx_train: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != kxx_train.nrows() {
            return Err(Error::DimensionMismatch {
                context: "coefficient rows vs training samples",
                expected: kxx_train.nrows(),
                found: a.nrows(),
            });
        }
        let ka = kxx_train * a;
        let kdd = congruence(a, &ka);
        let kxd = ka.transpose();
        GramBundle::new(kdd, kxd, kxx_train.diagonal())
    }

    pub fn atoms(&self) -> usize {
        self.kdd.nrows()
    }

    pub fn queries(&self) -> usize {
        self.kxx.len()
    }

    pub fn query(&self, q: usize) -> QueryGram<'_> {
        QueryGram {
            kdd: &self.kdd,
            kxd: self.kxd.column(q).clone_owned(),
            kxx: self.kxx[q],
        }
    }
}

/// Kernel values for the implicit dictionary `Phi(D) = Phi(X) A`:
/// `K(D,D) = A' K(X,X) A` and `k(x,D) = A' k(x,X)`.
pub fn dual_gram(
    spec: &KernelSpec,
    train: &Samples,
    a: &DMatrix<f64>,
    queries: &Samples,
) -> Result<GramBundle> {
    if a.nrows() != train.len() {
        return Err(Error::DimensionMismatch {
            context: "coefficient rows vs training samples",
            expected: train.len(),
            found: a.nrows(),
        });
    }
    let kxx_train = gram_self(spec, train)?;
    if std::ptr::eq(train, queries) {
        return GramBundle::from_train_gram(&kxx_train, a);
    }
    let ka = &kxx_train * a;
    let kdd = congruence(a, &ka);
    let kxq = gram_matrix(spec, train, queries)?;
    let kxd = a.transpose() * kxq;
    let kxx = self_similarity(spec, queries)?;
    GramBundle::new(kdd, kxd, kxx)
}

/// `A' B` where `B = K A` for a symmetric `K`; the upper triangle is
/// computed and mirrored so the result is exactly symmetric.
pub(crate) fn congruence(a: &DMatrix<f64>, ka: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    symmetric_from_fn(n, |i, j| a.column(i).dot(&ka.column(j)))
}

/// Builds an exactly symmetric matrix evaluating `f` on the upper triangle.
pub(crate) fn symmetric_from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let v = f(i, j);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl fmt::Display for BaseKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseKernel::Linear => write!(f, "linear"),
            BaseKernel::Gaussian { beta } => write!(f, "gaussian:{beta:?}"),
            BaseKernel::Polynomial { beta, degree } => write!(f, "polynomial:{beta:?}:{degree}"),
            BaseKernel::Sigmoid { scale, offset } => write!(f, "sigmoid:{scale:?}:{offset:?}"),
            BaseKernel::LogEuclidean { beta } => write!(f, "log_euclidean:{beta:?}"),
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Base(b) => write!(f, "{b}"),
            KernelSpec::Combination(members) => {
                for (i, (b, w)) in members.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{w:?}*{b}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for BaseKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').map(str::trim).collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::InvalidParameter(format!("kernel `{s}`: missing parameter")))?
                .parse::<f64>()
                .map_err(|e| Error::InvalidParameter(format!("kernel `{s}`: {e}")))
        };
        let arity = |n: usize| -> Result<()> {
            if parts.len() != n + 1 {
                return Err(Error::InvalidParameter(format!(
                    "kernel `{s}` expects {n} parameter(s)"
                )));
            }
            Ok(())
        };
        let kernel = match parts[0] {
            "linear" => {
                arity(0)?;
                BaseKernel::Linear
            }
            "gaussian" => {
                arity(1)?;
                BaseKernel::Gaussian { beta: num(1)? }
            }
            "polynomial" => {
                arity(2)?;
                let degree = parts[2].parse::<u32>().map_err(|e| {
                    Error::InvalidParameter(format!("kernel `{s}`: degree: {e}"))
                })?;
                BaseKernel::Polynomial { beta: num(1)?, degree }
            }
            "sigmoid" => {
                arity(2)?;
                BaseKernel::Sigmoid { scale: num(1)?, offset: num(2)? }
            }
            "log_euclidean" => {
                arity(1)?;
                BaseKernel::LogEuclidean { beta: num(1)? }
            }
            other => {
                return Err(Error::InvalidParameter(format!("unknown kernel family `{other}`")))
            }
        };
        kernel.validate()?;
        Ok(kernel)
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    /// `gaussian:0.5`, or a combination `0.3*linear + 0.7*gaussian:2`.
    fn from_str(s: &str) -> Result<Self> {
        if !s.contains('*') {
            return Ok(KernelSpec::Base(s.parse()?));
        }
        let members = s
            .split('+')
            .map(|term| {
                let (w, k) = term.split_once('*').ok_or_else(|| {
                    Error::InvalidParameter(format!("combination term `{}` lacks a weight", term.trim()))
                })?;
                let w = w
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidParameter(format!("weight `{}`: {e}", w.trim())))?;
                Ok((k.parse::<BaseKernel>()?, w))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = KernelSpec::Combination(members);
        spec.validate()?;
        Ok(spec)
    }
}
