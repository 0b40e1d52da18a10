//! Dense kernels shared by the reductions and clusterers, plus PCA.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingMatrix;

pub const EIGEN_TOLERANCE: f64 = 1e-10;

#[inline]
pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-major N×N matrix of squared Euclidean distances.
pub fn squared_distance_matrix(m: &EmbeddingMatrix) -> Vec<f64> {
    let n = m.n();
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = m.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            if j != i {
                *slot = squared_euclidean(xi, m.row(j));
            }
        }
    });
    out
}

pub fn to_dmatrix(m: &EmbeddingMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.n(), m.dim(), m.data())
}

pub fn column_means(m: &EmbeddingMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.dim()];
    for r in m.rows() {
        for (acc, v) in mean.iter_mut().zip(r) {
            *acc += v;
        }
    }
    let n = m.n() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

/// Symmetric eigendecomposition with eigenpairs sorted by descending eigenvalue.
/// Eigenvectors are the columns of the returned matrix.
pub fn symmetric_eigen_desc(a: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let max_iter = 10 * n.max(1);
    let eig = SymmetricEigen::try_new(a, EIGEN_TOLERANCE, max_iter).ok_or(Error::EigenNotConverged { max_iter })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// q rows of length d, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Sum of all sample-covariance eigenvalues (total variance).
    pub total_variance: f64,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| {
                if self.total_variance > 0.0 {
                    v / self.total_variance
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn project_row(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(ci, (xi, mi))| ci * (xi - mi))
                    .sum()
            })
            .collect()
    }

    pub fn inverse_row(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (zk, c) in z.iter().zip(&self.components) {
            for (xi, ci) in x.iter_mut().zip(c) {
                *xi += zk * ci;
            }
        }
        x
    }
}

/// Fit the top-`q` principal axes of the sample covariance (N−1 denominator).
///
/// When d > N the N×N Gram matrix is decomposed instead. Each axis is signed so
/// that its largest-magnitude entry is positive.
pub fn pca_fit(m: &EmbeddingMatrix, q: usize) -> Result<PcaModel> {
    let (n, d) = (m.n(), m.dim());
    if n < 2 {
        return Err(Error::invalid("PCA needs at least 2 samples"));
    }
    let max_q = (n - 1).min(d);
    if q == 0 || q > max_q {
        return Err(Error::invalid(format!("PCA target dimension {q} outside [1, {max_q}]")));
    }
    let mean = column_means(m);
    let mut x = to_dmatrix(m);
    for mut row in x.row_iter_mut() {
        for (v, mu) in row.iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    let denom = (n - 1) as f64;

    let (values, mut components) = if d <= n {
        let cov = (x.transpose() * &x) / denom;
        let (values, vectors) = symmetric_eigen_desc(cov)?;
        let comps: Vec<Vec<f64>> = (0..q).map(|k| vectors.column(k).iter().copied().collect()).collect();
        (values, comps)
    } else {
        let gram = (&x * x.transpose()) / denom;
        let (values, vectors) = symmetric_eigen_desc(gram)?;
        let xt = x.transpose();
        let comps: Vec<Vec<f64>> = (0..q)
            .map(|k| (&xt * vectors.column(k)).iter().copied().collect())
            .collect();
        (values, comps)
    };
    orthonormalize(&mut components, d);
    for c in &mut components {
        fix_sign(c);
    }

    let explained_variance = values[..q].iter().map(|v| v.max(0.0)).collect();
    let total_variance = values.iter().take(max_q).map(|v| v.max(0.0)).sum();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

pub fn pca_transform(model: &PcaModel, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if m.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: model.dim(),
            found: m.dim(),
        });
    }
    let q = model.n_components();
    let data: Vec<f64> = m.rows().flat_map(|r| model.project_row(r)).collect();
    m.with_data(data, q)
}

// Modified Gram-Schmidt. Rank-deficient directions (only possible on the
// Gram path) are replaced by the first standard basis vector that survives.
fn orthonormalize(vectors: &mut [Vec<f64>], d: usize) {
    for k in 0..vectors.len() {
        let (done, rest) = vectors.split_at_mut(k);
        let v = &mut rest[0];
        project_out(v, done);
        let norm = dot(v, v).sqrt();
        if norm > 1e-10 {
            v.iter_mut().for_each(|x| *x /= norm);
            continue;
        }
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            project_out(&mut e, done);
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= norm);
                *v = e;
                break;
            }
        }
    }
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fix_sign(c: &mut [f64]) {
    let mut best = 0;
    for (i, v) in c.iter().enumerate() {
        if v.abs() > c[best].abs() {
            best = i;
        }
    }
    if c[best] < 0.0 {
        c.iter_mut().for_each(|v| *v = -*v);
    }
}
