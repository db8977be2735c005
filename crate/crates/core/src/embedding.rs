//! Unit-norm descriptors and their pairwise cosine similarities.
//!
//! Descriptors live on the unit hypersphere, where cosine similarity is
//! just the inner product. Rows are normalized explicitly before any
//! similarity is taken, so `S_ij = <z_i, z_j>` holds exactly.

use rayon::prelude::*;

use crate::{Error, Result};

/// Guard below which a vector is considered to have no direction.
pub const EPS_NORM: f64 = 1e-12;

/// Allowed deviation of a "normalized" row from unit length.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A dense global descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Descriptor {
    fn from(v: Vec<f64>) -> Self {
        Descriptor(v)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Projects `v` onto the unit sphere.
pub fn l2_normalize(v: &[f64]) -> Result<Descriptor> {
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("descriptor entry {bad}")));
    }
    let n = norm(v);
    if n <= EPS_NORM {
        return Err(Error::ZeroNorm(n));
    }
    Ok(Descriptor(v.iter().map(|x| x / n).collect()))
}

/// Vector-Jacobian product of `x -> x / |x|`.
///
/// Given the raw vector `x` and the gradient `g` with respect to its
/// normalized image `z`, returns `(g - z <z, g>) / |x|`.
pub fn normalize_backward(raw: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let n = norm(raw);
    let z: Vec<f64> = raw.iter().map(|x| x / n).collect();
    let zg = dot(&z, grad_unit);
    grad_unit
        .iter()
        .zip(&z)
        .map(|(g, zi)| (g - zi * zg) / n)
        .collect()
}

/// `N` descriptors of common dimension, stored row-major, with their
/// place labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    dim: usize,
    data: Vec<f64>,
    labels: Vec<u64>,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Builds a batch from raw rows without normalizing them.
    pub fn from_raw(rows: &[Vec<f64>], labels: Vec<u64>) -> Result<Self> {
        let dim = check_rows(rows, &labels)?;
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            dim,
            data,
            labels,
            normalized: false,
        })
    }

    /// Builds a batch by L2-normalizing every row.
    pub fn normalized(rows: &[Vec<f64>], labels: Vec<u64>) -> Result<Self> {
        let dim = check_rows(rows, &labels)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            data.extend(l2_normalize(r)?.0);
        }
        Ok(Self {
            dim,
            data,
            labels,
            normalized: true,
        })
    }

    /// Builds a batch from descriptors that are already unit-norm,
    /// verifying the norm of every row.
    pub fn from_descriptors(rows: Vec<Descriptor>, labels: Vec<u64>) -> Result<Self> {
        let raw: Vec<Vec<f64>> = rows.into_iter().map(Descriptor::into_inner).collect();
        let dim = check_rows(&raw, &labels)?;
        for (row, r) in raw.iter().enumerate() {
            let n = norm(r);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotNormalized { row, norm: n });
            }
        }
        Ok(Self {
            dim,
            data: raw.into_iter().flatten().collect(),
            labels,
            normalized: true,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Row-major `N x D` storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Returns a copy with the rows reordered so that new row `i` is old
    /// row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Self {
            dim: self.dim,
            data,
            labels: perm.iter().map(|&p| self.labels[p]).collect(),
            normalized: self.normalized,
        }
    }
}

fn check_rows(rows: &[Vec<f64>], labels: &[u64]) -> Result<usize> {
    if rows.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let dim = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
        return Err(Error::Shape(format!(
            "row {i} has dimension {}, expected {dim}",
            r.len()
        )));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("embedding entry".into()));
    }
    Ok(dim)
}

/// Dense symmetric `N x N` matrix of cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Wraps an arbitrary square matrix. Mining and loss code only needs
    /// the values, so this is also how tests feed synthetic similarities.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Shape(format!(
                "{} values for a {n}x{n} matrix",
                values.len()
            )));
        }
        Ok(Self { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Computes `S_ij = <z_i, z_j>` for a normalized batch.
///
/// Only the upper triangle is computed; the lower one is mirrored so the
/// result is exactly symmetric.
pub fn similarity_matrix(batch: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    if !batch.is_normalized() {
        return Err(Error::NotNormalized {
            row: 0,
            norm: batch.rows().next().map_or(0.0, norm),
        });
    }
    for (row, r) in batch.rows().enumerate() {
        let n = norm(r);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotNormalized { row, norm: n });
        }
    }
    let n = batch.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| dot(batch.row(i), batch.row(j))).collect())
        .collect();
    let mut values = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &s) in row.iter().enumerate() {
            let j = i + off;
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// Chain rule through `S = Z Z^T`: given `dL/dS` (row-major `N x N`),
/// returns `dL/dZ` (row-major `N x D`).
pub fn similarity_backward(grad_s: &[f64], batch: &EmbeddingBatch) -> Vec<f64> {
    let n = batch.len();
    let d = batch.dim();
    assert_eq!(grad_s.len(), n * n, "similarity gradient shape");
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let out_row = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            let w = grad_s[i * n + j] + grad_s[j * n + i];
            if w == 0.0 {
                continue;
            }
            for (o, z) in out_row.iter_mut().zip(batch.row(j)) {
                *o += w * z;
            }
        }
    }
    out
}
