//! Cosine similarity, dense pairwise similarity matrices and deterministic
//! similarity rankings.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::dataset::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Cosine similarity of two equal-length vectors, clamped to `[-1, 1]`.
///
/// Zero vectors are an error rather than a silent 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_similarity: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    if na == 0.0 {
        return Err(Error::ZeroVector { row: 0 });
    }
    let nb = norm(b);
    if nb == 0.0 {
        return Err(Error::ZeroVector { row: 1 });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean row norms; errors on the first zero row.
pub(crate) fn row_norms(e: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let norms: Vec<f64> = e
        .as_array()
        .outer_iter()
        .map(|r| norm(r.as_slice().expect("standard layout")))
        .collect();
    match norms.iter().position(|&n| n == 0.0) {
        Some(row) => Err(Error::ZeroVector { row }),
        None => Ok(norms),
    }
}

/// Symmetric `n x n` cosine similarity matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Array2<f64>);

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    /// Build from explicit values. Used for hand-built test instances; the
    /// input must already be square and symmetric.
    pub fn from_array(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::Shape(format!("similarity matrix must be square, got {r}x{c}")));
        }
        for i in 0..r {
            for j in 0..i {
                if (values[[i, j]] - values[[j, i]]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "similarity matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self(values))
    }
}

/// Pairwise cosine similarities of all rows.
///
/// Each entry is computed once from its own pair of rows, so the result does
/// not depend on how rows are distributed across threads.
pub fn similarity_matrix(e: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    let norms = row_norms(e)?;
    let n = e.n_samples();
    let data = e.as_slice();
    let dim = e.dim();
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| (dot(row(i), row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0))
                .collect()
        })
        .collect();

    let mut s = Array2::<f64>::zeros((n, n));
    for (i, vals) in upper.into_iter().enumerate() {
        s[[i, i]] = 1.0;
        for (off, v) in vals.into_iter().enumerate() {
            let j = i + 1 + off;
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    Ok(SimilarityMatrix(s))
}

/// Order used by every similarity ranking: similarity ascending, then index.
pub(crate) fn ascending_order(s: &SimilarityMatrix, anchor: usize) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        s.get(anchor, a)
            .total_cmp(&s.get(anchor, b))
            .then(a.cmp(&b))
    }
}

/// Sort `candidates` by similarity to `anchor`, ascending, ties by index.
pub fn rank_ascending(anchor: usize, candidates: &[usize], s: &SimilarityMatrix) -> Result<Vec<usize>> {
    if candidates.contains(&anchor) {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor} must not be among its own candidates"
        )));
    }
    if let Some(&bad) = candidates.iter().find(|&&c| c >= s.n()) {
        return Err(Error::Shape(format!("candidate {bad} out of range for n = {}", s.n())));
    }
    let mut out = candidates.to_vec();
    out.sort_by(ascending_order(s, anchor));
    Ok(out)
}
