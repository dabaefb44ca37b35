//! Seeded synthetic data sets.
//!
//! All generators draw from `ChaCha8Rng::seed_from_u64(seed)`, so outputs are
//! reproducible across platforms. Samples are emitted class by class.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::{symmetric_from_fn, Samples, SpdDescriptor};

/// Samples with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSamples {
    pub samples: Samples,
    pub labels: Vec<usize>,
}

impl LabeledSamples {
    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn select(&self, indices: &[usize]) -> LabeledSamples {
        LabeledSamples {
            samples: self.samples.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 2-D points on concentric circles, one class per radius, with Gaussian
/// radial noise of standard deviation `noise`.
pub fn gen_circles(per_class: usize, radii: &[f64], noise: f64, seed: u64) -> Result<LabeledSamples> {
    if !(noise >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise {noise} must be >= 0")));
    }
    for (i, a) in radii.iter().enumerate() {
        if radii[..i].contains(a) {
            return Err(Error::InvalidParameter(format!("radius {a} is repeated")));
        }
    }
    let mut rng = rng(seed);
    let total = per_class * radii.len();
    let mut x = DMatrix::zeros(2, total);
    let mut labels = Vec::with_capacity(total);
    for (class, &r) in radii.iter().enumerate() {
        for k in 0..per_class {
            let theta: f64 = rng.random_range(0.0..2.0 * PI);
            let z: f64 = rng.sample(StandardNormal);
            let radius = r + noise * z;
            let col = class * per_class + k;
            x[(0, col)] = radius * theta.cos();
            x[(1, col)] = radius * theta.sin();
            labels.push(class);
        }
    }
    Ok(LabeledSamples { samples: Samples::Vectors(x), labels })
}

/// Gaussian mixture, one class per center.
pub fn gen_blobs(
    per_class: usize,
    centers: &[DVector<f64>],
    covariances: &[DMatrix<f64>],
    seed: u64,
) -> Result<LabeledSamples> {
    if centers.len() != covariances.len() {
        return Err(Error::DimensionMismatch {
            context: "covariances per center",
            expected: centers.len(),
            found: covariances.len(),
        });
    }
    let d = centers.first().map_or(0, |c| c.len());
    let mut roots = Vec::with_capacity(centers.len());
    for (c, cov) in centers.iter().zip(covariances) {
        if c.len() != d || cov.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                context: "blob center/covariance dimension",
                expected: d,
                found: cov.nrows(),
            });
        }
        roots.push(psd_sqrt(cov)?);
    }
    let mut rng = rng(seed);
    let mut x = DMatrix::zeros(d, per_class * centers.len());
    let mut labels = Vec::with_capacity(x.ncols());
    for (class, (c, root)) in centers.iter().zip(&roots).enumerate() {
        for k in 0..per_class {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            x.set_column(class * per_class + k, &(c + root * z));
            labels.push(class);
        }
    }
    Ok(LabeledSamples { samples: Samples::Vectors(x), labels })
}

/// Four isotropic blobs at `(+-offset, +-offset)` labelled by the sign of
/// the coordinate product: a two-class problem no linear classifier solves.
pub fn gen_xor(per_blob: usize, offset: f64, spread: f64, seed: u64) -> Result<LabeledSamples> {
    let centers: Vec<DVector<f64>> = [(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)]
        .iter()
        .map(|&(a, b)| DVector::from_vec(vec![a * offset, b * offset]))
        .collect();
    let cov = DMatrix::identity(2, 2) * (spread * spread);
    let blobs = gen_blobs(per_blob, &centers, &vec![cov; 4], seed)?;
    let labels = blobs.labels.iter().map(|&b| b / 2).collect();
    Ok(LabeledSamples { samples: blobs.samples, labels })
}

/// Random SPD matrices `Q diag(l) Q'` with Haar-like orthogonal `Q` and
/// eigenvalues log-uniform in `[1/anisotropy, anisotropy]`.
pub fn gen_spd(count: usize, dim: usize, anisotropy: f64, seed: u64) -> Result<Vec<SpdDescriptor>> {
    let mut rng = rng(seed);
    spd_batch(&mut rng, count, dim, anisotropy)
}

/// Labelled SPD descriptors; class `c` uses `anisotropies[c]`.
pub fn gen_spd_classes(per_class: usize, dim: usize, anisotropies: &[f64], seed: u64) -> Result<LabeledSamples> {
    let mut rng = rng(seed);
    let mut all = Vec::new();
    let mut labels = Vec::new();
    for (class, &a) in anisotropies.iter().enumerate() {
        all.extend(spd_batch(&mut rng, per_class, dim, a)?);
        labels.extend(std::iter::repeat_n(class, per_class));
    }
    Ok(LabeledSamples { samples: Samples::Spd(all), labels })
}

fn spd_batch(rng: &mut ChaCha8Rng, count: usize, dim: usize, anisotropy: f64) -> Result<Vec<SpdDescriptor>> {
    if dim < 2 {
        return Err(Error::InvalidParameter(format!("SPD dimension {dim} must be >= 2")));
    }
    if !(anisotropy >= 1.0) || !anisotropy.is_finite() {
        return Err(Error::InvalidParameter(format!("anisotropy {anisotropy} must be >= 1")));
    }
    let spread = anisotropy.ln();
    (0..count)
        .map(|_| {
            let q = random_orthogonal(rng, dim);
            let eig: Vec<f64> = (0..dim)
                .map(|_| {
                    if spread > 0.0 {
                        rng.random_range(-spread..=spread).exp()
                    } else {
                        1.0
                    }
                })
                .collect();
            let m = if spread > 0.0 {
                symmetric_from_fn(dim, |i, j| (0..dim).map(|k| q[(i, k)] * eig[k] * q[(j, k)]).sum())
            } else {
                DMatrix::identity(dim, dim)
            };
            SpdDescriptor::new(m)
        })
        .collect()
}

/// Orthonormalized Gaussian matrix with the QR sign ambiguity removed.
fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for k in 0..dim {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.iter().any(|&v| v < -1e-12 * cov.amax().max(1.0)) {
        return Err(Error::InvalidParameter("covariance is not positive semi-definite".into()));
    }
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s))
}

/// Random train/test partition of `0..total`; both halves come back sorted.
pub fn split_indices(total: usize, train: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if train > total {
        return Err(Error::InvalidParameter(format!("cannot take {train} training samples out of {total}")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng(seed));
    let mut tr = order[..train].to_vec();
    let mut te = order[train..].to_vec();
    tr.sort_unstable();
    te.sort_unstable();
    Ok((tr, te))
}
