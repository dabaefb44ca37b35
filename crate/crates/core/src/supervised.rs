//! Supervised coding: dictionary, codes and a least-squares classifier
//! learned jointly.
//!
//! The classifier is either linear on the codes (`l ~ W y`) or bilinear in
//! the sample and its code (`l_j ~ phi(x)' W_j y` with `W_j = Phi(X) A_j`).
//! Training codes carry the classifier loss; test codes do not.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::coders::{assemble, Augmentation, BatchEncoder, CodeMatrix, CodingParams, Scheme};
use crate::dictlearn::{
    dead_atoms, init_dictionary, is_monotone_scheme, mean_objective, relative_decrease, step_slack,
    update_dictionary, update_dictionary_llc, DualDictionary, FitReport,
};
use crate::error::{Error, Result};
use crate::kernels::{gram_self, symmetric_from_fn, GramBundle, KernelSpec, Samples};
use crate::numerics::ridge_solve;

/// One-hot label columns, `S x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub l: DMatrix<f64>,
}

impl LabelMatrix {
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        let mut l = DMatrix::zeros(classes, labels.len());
        for (i, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(Error::InvalidParameter(format!("label {c} of sample {i} is not below {classes}")));
            }
            l[(c, i)] = 1.0;
        }
        Ok(LabelMatrix { l })
    }

    pub fn classes(&self) -> usize {
        self.l.nrows()
    }

    pub fn samples(&self) -> usize {
        self.l.ncols()
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.l.column(i).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Linear,
    Bilinear,
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(ClassifierKind::Linear),
            "bilinear" => Ok(ClassifierKind::Bilinear),
            other => Err(Error::InvalidParameter(format!("unknown classifier kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    /// `W`, `S x N`.
    Linear(DMatrix<f64>),
    /// One `M x N` coefficient matrix `A_j` per class.
    Bilinear(Vec<DMatrix<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedModel {
    pub classifier: Classifier,
    pub eta: f64,
    pub rho: f64,
}

impl SupervisedModel {
    pub fn kind(&self) -> ClassifierKind {
        match self.classifier {
            Classifier::Linear(_) => ClassifierKind::Linear,
            Classifier::Bilinear(_) => ClassifierKind::Bilinear,
        }
    }

    pub fn classes(&self) -> usize {
        match &self.classifier {
            Classifier::Linear(w) => w.nrows(),
            Classifier::Bilinear(a) => a.len(),
        }
    }
}

fn check_hyper(eta: f64, rho: f64) -> Result<()> {
    if !(eta >= 0.0) || !(rho >= 0.0) || !eta.is_finite() || !rho.is_finite() {
        return Err(Error::InvalidParameter(format!("eta {eta} and rho {rho} must be finite and >= 0")));
    }
    Ok(())
}

fn check_columns(y: &DMatrix<f64>, l: &LabelMatrix) -> Result<()> {
    if y.ncols() != l.samples() {
        return Err(Error::DimensionMismatch { context: "codes vs labels", expected: l.samples(), found: y.ncols() });
    }
    Ok(())
}

/// `W = L Y' (Y Y' + (rho M / eta) I)^{-1}`, the minimizer of
/// `(eta/M) |L - W Y|_F^2 + rho |W|_F^2`. Zero when `eta = 0`.
pub fn fit_linear_classifier(y: &DMatrix<f64>, l: &LabelMatrix, eta: f64, rho: f64) -> Result<DMatrix<f64>> {
    check_hyper(eta, rho)?;
    check_columns(y, l)?;
    if eta == 0.0 {
        return Ok(DMatrix::zeros(l.classes(), y.nrows()));
    }
    let m = y.ncols() as f64;
    let gram = y * y.transpose();
    let gram = symmetric_from_fn(gram.nrows(), |i, j| gram[(i, j)]);
    // W' solves (Y Y' + lambda I) W' = Y L'.
    let wt = ridge_solve(&gram, &(y * l.l.transpose()), rho * m / eta)?;
    Ok(wt.transpose())
}

/// `(eta/M) |L - W Y|_F^2 + rho |W|_F^2`
pub fn linear_classifier_objective(w: &DMatrix<f64>, y: &DMatrix<f64>, l: &LabelMatrix, eta: f64, rho: f64) -> f64 {
    let m = y.ncols().max(1) as f64;
    eta / m * (&l.l - w * y).norm_squared() + rho * w.norm_squared()
}

/// Classifier coefficients `A_j` minimizing
/// `(eta/M) sum_ij (L_ji - k(x_i,X) A_j y_i)^2 + (rho/S) sum_j tr(A_j' K A_j)`.
///
/// Every stationary point is reached by `A_j = diag(alpha_j) Y'` with
/// `(K o Y'Y + lambda I) alpha_j = l_j`, `lambda = rho M / (eta S)`, which
/// replaces the `MN x MN` normal equations by one `M x M` system shared by
/// all classes. `cap` bounds `M N` as for a dense solve.
pub fn fit_bilinear_classifier(
    kxx: &DMatrix<f64>,
    y: &DMatrix<f64>,
    l: &LabelMatrix,
    eta: f64,
    rho: f64,
    cap: usize,
) -> Result<Vec<DMatrix<f64>>> {
    check_hyper(eta, rho)?;
    check_columns(y, l)?;
    let (n, m) = y.shape();
    if kxx.shape() != (m, m) {
        return Err(Error::DimensionMismatch { context: "training Gram vs codes", expected: m, found: kxx.nrows() });
    }
    if m * n > cap {
        return Err(Error::TooLarge { size: m * n, cap });
    }
    let s = l.classes();
    if eta == 0.0 {
        return Ok(vec![DMatrix::zeros(m, n); s]);
    }
    let yty = y.tr_mul(y);
    let g = symmetric_from_fn(m, |i, k| kxx[(i, k)] * yty[(i, k)]);
    let lambda = rho * m as f64 / (eta * s as f64);
    let alpha = ridge_solve(&g, &l.l.transpose(), lambda)?;
    let yt = y.transpose();
    Ok((0..s)
        .map(|j| {
            let mut a = yt.clone();
            for i in 0..m {
                a.row_mut(i).scale_mut(alpha[(i, j)]);
            }
            a
        })
        .collect())
}

/// Per-sample score matrix `G` with row `j = (A_j' kappa)'`.
pub fn bilinear_scores_matrix(coeffs: &[DMatrix<f64>], kappa: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = coeffs.first().map_or(0, |a| a.ncols());
    let mut g = DMatrix::zeros(coeffs.len(), n);
    for (j, a) in coeffs.iter().enumerate() {
        if a.nrows() != kappa.len() {
            return Err(Error::DimensionMismatch { context: "k(x,X) vs classifier rows", expected: a.nrows(), found: kappa.len() });
        }
        g.row_mut(j).copy_from(&a.tr_mul(kappa).transpose());
    }
    Ok(g)
}

/// `(eta/M) sum_ij (L_ji - kappa_i' A_j y_i)^2 + (rho/S) sum_j tr(A_j' K A_j)`
pub fn bilinear_classifier_objective(
    kxx: &DMatrix<f64>,
    coeffs: &[DMatrix<f64>],
    y: &DMatrix<f64>,
    l: &LabelMatrix,
    eta: f64,
    rho: f64,
) -> f64 {
    let m = y.ncols().max(1) as f64;
    let s = coeffs.len().max(1) as f64;
    let mut loss = 0.0;
    let mut reg = 0.0;
    for (j, a) in coeffs.iter().enumerate() {
        let ka = kxx * a;
        for i in 0..y.ncols() {
            let pred = ka.column_iter().zip(y.column(i).iter()).map(|(c, &yi)| c[i] * yi).sum::<f64>();
            loss += (l.l[(j, i)] - pred).powi(2);
        }
        reg += a.dot(&ka);
    }
    eta / m * loss + rho / s * reg
}

/// Code of one training sample under the linear classifier. Without a label
/// (test time) or with `eta = 0` this is the unsupervised code.
pub fn encode_supervised_linear(
    encoder: &BatchEncoder<'_>,
    q: usize,
    w: &DMatrix<f64>,
    label: Option<&DVector<f64>>,
    eta: f64,
) -> Result<(DVector<f64>, Option<Vec<usize>>)> {
    match label {
        Some(t) => encoder.encode_augmented(q, Some(&Augmentation { g: w, target: t, eta })),
        None => encoder.encode(q),
    }
}

/// Code of one training sample under the bilinear classifier; `kappa` is
/// `k(x, X)`.
pub fn encode_supervised_bilinear(
    encoder: &BatchEncoder<'_>,
    q: usize,
    coeffs: &[DMatrix<f64>],
    kappa: &DVector<f64>,
    label: Option<&DVector<f64>>,
    eta: f64,
) -> Result<(DVector<f64>, Option<Vec<usize>>)> {
    match label {
        Some(t) if eta != 0.0 => {
            let g = bilinear_scores_matrix(coeffs, kappa)?;
            encoder.encode_augmented(q, Some(&Augmentation { g: &g, target: t, eta }))
        }
        _ => encoder.encode(q),
    }
}

/// Class scores of a code; `kappa = k(x, X)` is needed for the bilinear kind.
pub fn scores(model: &SupervisedModel, y: &DVector<f64>, kappa: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    match &model.classifier {
        Classifier::Linear(w) => {
            if w.ncols() != y.len() {
                return Err(Error::DimensionMismatch { context: "classifier columns vs code", expected: w.ncols(), found: y.len() });
            }
            Ok(w * y)
        }
        Classifier::Bilinear(coeffs) => {
            let kappa = kappa.ok_or_else(|| Error::InvalidParameter("the bilinear classifier needs k(x, X)".into()))?;
            Ok(bilinear_scores_matrix(coeffs, kappa)? * y)
        }
    }
}

/// Highest-scoring class, the smallest index on ties.
pub fn predict(model: &SupervisedModel, y: &DVector<f64>, kappa: Option<&DVector<f64>>) -> Result<usize> {
    let s = scores(model, y, kappa)?;
    let mut best = 0;
    for j in 1..s.len() {
        if s[j] > s[best] {
            best = j;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedOptions {
    pub kind: ClassifierKind,
    pub eta: f64,
    pub rho: f64,
    pub atoms: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Bound on `M N` for the bilinear classifier.
    pub bilinear_cap: usize,
}

impl Default for SupervisedOptions {
    fn default() -> Self {
        SupervisedOptions {
            kind: ClassifierKind::Linear,
            eta: 1.0,
            rho: 1e-3,
            atoms: 16,
            max_iter: 20,
            tol: 1e-6,
            seed: 0,
            bilinear_cap: 4096,
        }
    }
}

struct Trainer<'a> {
    k: &'a DMatrix<f64>,
    labels: &'a LabelMatrix,
    scheme: Scheme,
    params: &'a CodingParams,
    opts: &'a SupervisedOptions,
}

impl Trainer<'_> {
    fn encode(&self, bundle: &GramBundle, classifier: &Classifier) -> Result<CodeMatrix> {
        let encoder = BatchEncoder::new(bundle, self.params, self.scheme)?;
        if self.opts.eta == 0.0 {
            return encoder.encode_all();
        }
        let results: Vec<_> = (0..bundle.queries())
            .into_par_iter()
            .map(|i| {
                let t = self.labels.column(i);
                match classifier {
                    Classifier::Linear(w) => encode_supervised_linear(&encoder, i, w, Some(&t), self.opts.eta),
                    Classifier::Bilinear(a) => {
                        let kappa = self.k.column(i).into_owned();
                        encode_supervised_bilinear(&encoder, i, a, &kappa, Some(&t), self.opts.eta)
                    }
                }
            })
            .collect::<Result<_>>()?;
        assemble(bundle.atoms(), self.scheme, results)
    }

    fn fit_classifier(&self, y: &DMatrix<f64>) -> Result<Classifier> {
        let (eta, rho) = (self.opts.eta, self.opts.rho);
        Ok(match self.opts.kind {
            ClassifierKind::Linear => Classifier::Linear(fit_linear_classifier(y, self.labels, eta, rho)?),
            ClassifierKind::Bilinear => Classifier::Bilinear(fit_bilinear_classifier(
                self.k,
                y,
                self.labels,
                eta,
                rho,
                self.opts.bilinear_cap,
            )?),
        })
    }

    fn total(&self, bundle: &GramBundle, y: &DMatrix<f64>, classifier: &Classifier) -> f64 {
        let coding = mean_objective(bundle, y, self.scheme, self.params);
        let (eta, rho) = (self.opts.eta, self.opts.rho);
        coding
            + match classifier {
                Classifier::Linear(w) => linear_classifier_objective(w, y, self.labels, eta, rho),
                Classifier::Bilinear(a) => bilinear_classifier_objective(self.k, a, y, self.labels, eta, rho),
            }
    }
}

/// Alternates supervised coding, dictionary updates and classifier refits on
/// the training set.
pub fn fit_supervised(
    x: &Samples,
    labels: &[usize],
    spec: &KernelSpec,
    scheme: Scheme,
    params: &CodingParams,
    opts: &SupervisedOptions,
) -> Result<(DualDictionary, SupervisedModel, CodeMatrix, FitReport)> {
    if labels.len() != x.len() {
        return Err(Error::DimensionMismatch { context: "labels vs samples", expected: x.len(), found: labels.len() });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let present = (0..classes).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(Error::InvalidParameter("supervised learning needs at least two classes".into()));
    }
    if opts.max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
    }
    if scheme == Scheme::SoftBow {
        return Err(Error::InvalidParameter(
            "supervised coding supports hard_bow, ksc, llc_exact and llc_approx".into(),
        ));
    }
    check_hyper(opts.eta, opts.rho)?;
    let k = gram_self(spec, x)?;
    let l = LabelMatrix::from_labels(labels, classes)?;
    let trainer = Trainer { k: &k, labels: &l, scheme, params, opts };

    let mut a = init_dictionary(x.len(), opts.atoms, opts.seed)?.coefficients().expect("dual").clone();
    let mut bundle = GramBundle::from_train_gram(&k, &a)?;
    let zero = match opts.kind {
        ClassifierKind::Linear => Classifier::Linear(DMatrix::zeros(classes, opts.atoms)),
        ClassifierKind::Bilinear => Classifier::Bilinear(vec![DMatrix::zeros(x.len(), opts.atoms); classes]),
    };
    let mut codes = trainer.encode(&bundle, &zero)?;
    let mut classifier = trainer.fit_classifier(&codes.y)?;
    let mut report = FitReport::default();
    report.objective_trace.push(trainer.total(&bundle, &codes.y, &classifier));

    for it in 1..=opts.max_iter {
        if it > 1 {
            codes = trainer.encode(&bundle, &classifier)?;
        }
        let update = match scheme {
            Scheme::LlcApprox => update_dictionary_llc(&codes)?,
            _ => update_dictionary(&codes.y)?,
        };
        a = update.a;
        bundle = GramBundle::from_train_gram(&k, &a)?;
        classifier = trainer.fit_classifier(&codes.y)?;
        let current = trainer.total(&bundle, &codes.y, &classifier);
        report.ridges.push(update.ridge);
        report.iterations = it;
        let previous = *report.objective_trace.last().expect("seeded");
        report.objective_trace.push(current);
        // The sparse coder works on the eigen-clipped Gram, so its steps are
        // exact only up to the clipping; allow the looser slack throughout.
        if current > previous + step_slack(previous, 1.0) {
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
    let model = SupervisedModel { classifier, eta: opts.eta, rho: opts.rho };
    Ok((DualDictionary::dual(a), model, codes, report))
}
