//! Label assignment from codes and accuracy bookkeeping.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::QueryGram;

/// Per-class residuals `-2 y_s' k(x,D) + y_s' K(D,D) y_s`, where `y_s` keeps
/// the entries of atoms labelled `s`. `k(x,x)` is the same for every class
/// and is left out.
pub fn class_residuals(view: &QueryGram<'_>, y: &DVector<f64>, atom_labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let n = view.kxd.len();
    if y.len() != n || atom_labels.len() != n {
        return Err(Error::DimensionMismatch { context: "code, atom labels and dictionary", expected: n, found: y.len().max(atom_labels.len()) });
    }
    if let Some(&bad) = atom_labels.iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidParameter(format!("atom label {bad} is not below the class count {classes}")));
    }
    Ok((0..classes)
        .map(|s| {
            let ys = DVector::from_fn(n, |j, _| if atom_labels[j] == s { y[j] } else { 0.0 });
            -2.0 * ys.dot(&view.kxd) + ys.dot(&(view.kdd * &ys))
        })
        .collect())
}

/// Class with the smallest residual among classes that own at least one
/// atom, smallest index on ties. Returns the class and all residuals
/// (zero for atom-less classes).
pub fn residual_classify(
    view: &QueryGram<'_>,
    y: &DVector<f64>,
    atom_labels: &[usize],
    classes: usize,
) -> Result<(usize, Vec<f64>)> {
    let residuals = class_residuals(view, y, atom_labels, classes)?;
    let mut best: Option<usize> = None;
    for s in (0..classes).filter(|s| atom_labels.contains(s)) {
        if best.is_none_or(|b| residuals[s] < residuals[b]) {
            best = Some(s);
        }
    }
    let best = best.ok_or(Error::EmptyInput("labelled dictionary"))?;
    Ok((best, residuals))
}

/// Label of the nearest training code in Euclidean distance, the earliest
/// training sample on ties.
pub fn nn_classify(train: &DMatrix<f64>, labels: &[usize], query: &DVector<f64>) -> Result<usize> {
    if train.ncols() == 0 {
        return Err(Error::EmptyInput("training codes"));
    }
    if labels.len() != train.ncols() {
        return Err(Error::DimensionMismatch { context: "training labels vs codes", expected: train.ncols(), found: labels.len() });
    }
    if query.len() != train.nrows() {
        return Err(Error::DimensionMismatch { context: "query code vs training codes", expected: train.nrows(), found: query.len() });
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, col) in train.column_iter().enumerate() {
        let d = (col - query).norm_squared();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(labels[best])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Accuracy over the samples of each true class; `None` for classes
    /// absent from the labels.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch { context: "predictions vs labels", expected: labels.len(), found: predictions.len() });
    }
    let classes = predictions.iter().chain(labels).max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        confusion[t][p] += 1;
    }
    let correct = (0..classes).map(|c| confusion[c][c]).sum::<usize>();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
        per_class,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{BaseKernel, GramBundle, KernelSpec, Samples};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_atoms() {
        let kdd = DMatrix::identity(3, 3);
        let view = QueryGram { kdd: &kdd, kxd: DVector::from_vec(vec![0.0, 1.0, 0.0]), kxx: 1.0 };
        let y = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let (c, r) = residual_classify(&view, &y, &[0, 1, 2], 3).unwrap();
        assert_eq!(c, 1);
        assert_eq!(r, vec![0.0, -1.0, 0.0]);
        let (c, r) = residual_classify(&view, &DVector::zeros(3), &[0, 1, 2], 3).unwrap();
        assert_eq!((c, r), (0, vec![0.0; 3]));
    }

    #[test]
    fn atom_less_classes_are_never_predicted() {
        let kdd = DMatrix::identity(2, 2);
        let view = QueryGram { kdd: &kdd, kxd: DVector::from_vec(vec![-1.0, -1.0]), kxx: 1.0 };
        // Both populated classes have positive residuals; class 0 owns no atom.
        let (c, r) = residual_classify(&view, &DVector::from_vec(vec![1.0, 2.0]), &[1, 2], 3).unwrap();
        assert_eq!(r[0], 0.0);
        assert_eq!(c, 1);
        assert!(residual_classify(&view, &DVector::zeros(2), &[3, 3], 3).is_err());
    }

    #[test]
    fn residuals_match_explicit_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let d = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
            let x = DMatrix::from_fn(4, 1, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let labels: Vec<usize> = (0..6).map(|j| j % 3).collect();
            let bundle = GramBundle::explicit(&KernelSpec::Base(BaseKernel::Linear), &Samples::Vectors(d.clone()), &Samples::Vectors(x.clone())).unwrap();
            let r = class_residuals(&bundle.query(0), &y, &labels, 3).unwrap();
            for s in 0..3 {
                let ys = DVector::from_fn(6, |j, _| if labels[j] == s { y[j] } else { 0.0 });
                let explicit = (x.column(0) - &d * ys).norm_squared() - x.column(0).norm_squared();
                assert_relative_eq!(r[s], explicit, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn nearest_neighbour_examples() {
        let train = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(nn_classify(&train, &[4, 5, 6], &DVector::from_vec(vec![1.0, 0.0])).unwrap(), 5);
        let one = DMatrix::from_row_slice(2, 1, &[3.0, 3.0]);
        assert_eq!(nn_classify(&one, &[2], &DVector::from_vec(vec![-9.0, 1.0])).unwrap(), 2);
        // Equidistant from the last two: the earlier sample wins.
        assert_eq!(nn_classify(&train, &[4, 5, 6], &DVector::from_vec(vec![0.6, 0.6])).unwrap(), 5);
    }

    proptest! {
        #[test]
        fn nearest_neighbour_matches_scan(seed in 0u64..1000, m in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = DMatrix::from_fn(3, m, |_, _| rng.random_range(-1.0..1.0));
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..4)).collect();
            let q = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let dists: Vec<f64> = (0..m).map(|i| (train.column(i) - &q).norm()).collect();
            let best = (0..m).min_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap()).unwrap();
            prop_assert_eq!(nn_classify(&train, &labels, &q).unwrap(), labels[best]);
        }
    }

    #[test]
    fn evaluation_examples() {
        let m = evaluate(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(evaluate(&[1, 0, 0], &[0, 1, 1]).unwrap().accuracy, 0.0);
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let preds = [0, 0, 0, 0, 1, 1, 1, 0, 1, 0];
        let m = evaluate(&preds, &labels).unwrap();
        assert_eq!(m.accuracy, 0.7);
        assert_eq!(m.confusion, vec![vec![4, 1], vec![2, 3]]);
        assert_eq!(m.per_class, vec![Some(0.8), Some(0.6)]);
        assert_eq!(evaluate(&[2], &[0]).unwrap().per_class, vec![Some(0.0), None, None]);
        assert!(evaluate(&[], &[]).is_err());
        assert!(evaluate(&[0], &[0, 1]).is_err());
    }
}
