//! Sample-quality metrics in data space: Fréchet distance between Gaussian
//! fits, k-NN precision and recall, and mixture mode coverage.

mod kdtree;

pub use kdtree::KdTree;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::data::{dist, Mixture};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SYM_TOL: f64 = 1e-10;

/// Mean and covariance of a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    count: usize,
}

impl GaussianSummary {
    /// The covariance must be symmetric and positive semi-definite within
    /// `1e-10`; slightly negative eigenvalues are tolerated.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::Validation(format!(
                "covariance needs {} entries for dimension {d}",
                d * d
            )));
        }
        let cov = DMatrix::from_row_slice(d, d, &cov);
        if (&cov - cov.transpose()).amax() > SYM_TOL {
            return Err(Error::Validation("covariance is not symmetric".into()));
        }
        let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        if min_eig < -SYM_TOL {
            return Err(Error::Validation(format!(
                "covariance has negative eigenvalue {min_eig}"
            )));
        }
        Ok(GaussianSummary {
            mean: DVector::from_vec(mean),
            cov,
            count,
        })
    }

    /// Sample mean and unbiased covariance of the rows of `x` (needs 2 rows).
    pub fn from_samples(x: &Tensor) -> Result<Self> {
        let (n, d) = (x.rows(), x.last_dim());
        if n < 2 {
            return Err(Error::contract("a covariance needs at least two samples"));
        }
        let m = DMatrix::from_row_slice(n, d, x.data());
        let mean = m.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        // exact symmetry regardless of summation order
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(GaussianSummary {
            mean,
            cov,
            count: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `|μa - μb|² + tr(Σa + Σb - 2 (Σa Σb)^{1/2})`, with the trace of the root
/// taken from the eigenvalues of `Σa^{1/2} Σb Σa^{1/2}`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "Fréchet distance between dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let mut prod = &ra * &b.cov * &ra;
    prod = (&prod + prod.transpose()) * 0.5;
    let root_trace: f64 = SymmetricEigen::new(prod)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * root_trace;
    Ok(d.max(0.0))
}

/// Fréchet distance for each class that has at least two samples on both
/// sides; `None` otherwise.
pub fn per_class_frechet(
    real: &Tensor,
    real_labels: &[usize],
    fake: &Tensor,
    fake_labels: &[usize],
    classes: usize,
) -> Result<Vec<Option<f64>>> {
    (0..classes)
        .map(|c| {
            let pick = |labels: &[usize]| -> Vec<usize> {
                labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect()
            };
            let (ri, fi) = (pick(real_labels), pick(fake_labels));
            if ri.len() < 2 || fi.len() < 2 {
                return Ok(None);
            }
            let a = GaussianSummary::from_samples(&real.select_rows(&ri))?;
            let b = GaussianSummary::from_samples(&fake.select_rows(&fi))?;
            frechet_distance(&a, &b).map(Some)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrSummary {
    pub precision: f64,
    pub recall: f64,
    pub k: usize,
}

/// Fraction of `queries` inside some `k`-NN ball of `support`.
fn manifold_fraction(support: &Tensor, queries: &Tensor, k: usize) -> f64 {
    let d = support.last_dim();
    let mut tree = KdTree::build(support.data(), d);
    let radii = (0..support.rows())
        .map(|i| tree.kth_distance(support.row(i), k, Some(i)))
        .collect();
    tree.set_radii(radii);
    let hits = (0..queries.rows()).filter(|&i| tree.covered(queries.row(i))).count();
    hits as f64 / queries.rows() as f64
}

/// Improved precision and recall: each set's manifold is the union of balls
/// reaching every point's `k`-th nearest neighbor in the same set.
pub fn knn_precision_recall(real: &Tensor, fake: &Tensor, k: usize) -> Result<PrSummary> {
    if k == 0 || real.rows() <= k || fake.rows() <= k {
        return Err(Error::contract(format!(
            "precision/recall with k = {k} needs more than k points per set, got {} and {}",
            real.rows(),
            fake.rows()
        )));
    }
    if real.last_dim() != fake.last_dim() {
        return Err(Error::contract("real and generated samples differ in dimension"));
    }
    Ok(PrSummary {
        precision: manifold_fraction(real, fake, k),
        recall: manifold_fraction(fake, real, k),
        k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeCoverage {
    pub covered: usize,
    pub per_mode: Vec<usize>,
}

/// A mode counts as covered when at least 1% of the samples lie within
/// `radius` of its mean (default three sigma). `points` is flat row-major.
pub fn mode_coverage(points: &[f64], mixture: &Mixture, radius: Option<f64>) -> ModeCoverage {
    let r = radius.unwrap_or(3.0 * mixture.sigma());
    let d = mixture.dim();
    let n = points.len() / d;
    let mut per_mode = vec![0; mixture.classes()];
    for p in points.chunks_exact(d) {
        for (c, mu) in mixture.means().iter().enumerate() {
            if dist(p, mu) <= r {
                per_mode[c] += 1;
            }
        }
    }
    let covered = per_mode
        .iter()
        .filter(|&&m| m > 0 && m as f64 >= 0.01 * n as f64)
        .count();
    ModeCoverage { covered, per_mode }
}
