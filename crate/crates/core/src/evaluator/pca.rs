//! PCA with whitening for descriptor compression.
//!
//! Fit centers the training descriptors, eigendecomposes their sample
//! covariance (divisor `N - 1`), and keeps the top `out_dim` axes scaled
//! by `1 / sqrt(lambda + epsilon)`. When there are fewer samples than
//! dimensions the eigenproblem is solved on the `N x N` Gram matrix
//! instead, which has the same nonzero spectrum.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::embedding::{l2_normalize, Descriptor, EmbeddingBatch};
use crate::{Error, Result};

pub const DEFAULT_PCA_EPSILON: f64 = 1e-9;

/// Relative cutoff below which an eigenvalue counts as zero for rank.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PCAModel {
    pub mean: Vec<f64>,
    /// `out_dim x in_dim`, row-major; row `i` is the `i`-th principal axis
    /// divided by `sqrt(eigenvalues[i] + epsilon)`.
    pub projection: Vec<f64>,
    /// Nonincreasing.
    pub eigenvalues: Vec<f64>,
    pub epsilon: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl PCAModel {
    /// Whitened coordinates `P (v - mean)` without normalization.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "descriptor dimension {} vs PCA input dimension {}",
                v.len(),
                self.in_dim
            )));
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self
            .projection
            .chunks_exact(self.in_dim)
            .map(|row| row.iter().zip(&centered).map(|(p, c)| p * c).sum())
            .collect())
    }

    /// Unit principal axis `i` (projection row rescaled back).
    pub fn axis(&self, i: usize) -> Vec<f64> {
        let s = (self.eigenvalues[i] + self.epsilon).sqrt();
        self.projection[i * self.in_dim..(i + 1) * self.in_dim]
            .iter()
            .map(|p| p * s)
            .collect()
    }
}

/// Fits a whitening PCA keeping `out_dim` components.
pub fn pca_whiten_fit(training: &EmbeddingBatch, out_dim: usize, epsilon: f64) -> Result<PCAModel> {
    let n = training.len();
    let d = training.dim();
    if out_dim == 0 || out_dim > d {
        return Err(Error::InvalidParam(format!(
            "output dimension {out_dim} must be in 1..={d}"
        )));
    }
    if n <= out_dim {
        return Err(Error::InvalidParam(format!(
            "{n} training samples cannot support {out_dim} components"
        )));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParam(format!("epsilon {epsilon}")));
    }

    let mut mean = vec![0.0; d];
    for row in training.rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| training.row(i)[j] - mean[j]);
    let denom = (n - 1) as f64;

    // (eigenvalue, unit axis) pairs, unsorted.
    let mut components: Vec<(f64, DVector<f64>)> = if d <= n {
        let cov = (centered.transpose() * &centered) / denom;
        let eig = SymmetricEigen::new(cov);
        eig.eigenvalues
            .iter()
            .zip(eig.eigenvectors.column_iter())
            .map(|(&l, v)| (l.max(0.0), v.into_owned()))
            .collect()
    } else {
        let gram = (&centered * centered.transpose()) / denom;
        let eig = SymmetricEigen::new(gram);
        eig.eigenvalues
            .iter()
            .zip(eig.eigenvectors.column_iter())
            .map(|(&l, u)| {
                let v = centered.transpose() * u;
                let nv = v.norm();
                let v = if nv > 0.0 { v / nv } else { v };
                (l.max(0.0), v)
            })
            .collect()
    };
    components.sort_by(|a, b| b.0.total_cmp(&a.0));

    let top = components.first().map_or(0.0, |c| c.0);
    let rank = components
        .iter()
        .filter(|c| c.0 > RANK_TOL * top && c.0 > 0.0)
        .count();
    if out_dim > rank {
        return Err(Error::InvalidParam(format!(
            "output dimension {out_dim} exceeds training rank {rank}"
        )));
    }

    let mut projection = Vec::with_capacity(out_dim * d);
    let mut eigenvalues = Vec::with_capacity(out_dim);
    for (lambda, mut axis) in components.into_iter().take(out_dim) {
        if let Some(&first) = axis.iter().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                axis.neg_mut();
            }
        }
        let scale = 1.0 / (lambda + epsilon).sqrt();
        projection.extend(axis.iter().map(|a| a * scale));
        eigenvalues.push(lambda);
    }
    Ok(PCAModel {
        mean,
        projection,
        eigenvalues,
        epsilon,
        in_dim: d,
        out_dim,
    })
}

/// Whitens, reduces and renormalizes one descriptor.
pub fn pca_transform(model: &PCAModel, v: &[f64]) -> Result<Descriptor> {
    l2_normalize(&model.project(v)?)
}
