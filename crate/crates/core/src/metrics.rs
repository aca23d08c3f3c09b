//! Clustering evaluation: Hungarian-matched accuracy, NMI, ARI, silhouette,
//! and the Old/New/All subset report.
//!
//! Subset accuracies share one cluster-to-class map computed on the full
//! contingency table, so `correct_old + correct_new == correct_all`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Assignment, Dataset, EmbeddingMatrix, Split};
use crate::error::{Error, Result};

/// Counts of (predicted cluster, true class) pairs. Rows and columns are
/// dense re-indexings of the distinct values seen, in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    pub clusters: Vec<usize>,
    pub classes: Vec<usize>,
    pub counts: Vec<Vec<usize>>,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        check_lengths(pred, truth)?;
        let dense = |v: &[usize]| -> (Vec<usize>, BTreeMap<usize, usize>) {
            let mut ids: Vec<usize> = v.to_vec();
            ids.sort_unstable();
            ids.dedup();
            let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            (ids, index)
        };
        let (clusters, ci) = dense(pred);
        let (classes, ki) = dense(truth);
        let mut counts = vec![vec![0; classes.len()]; clusters.len()];
        for (p, t) in pred.iter().zip(truth) {
            counts[ci[p]][ki[t]] += 1;
        }
        Ok(Self {
            clusters,
            classes,
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<usize> {
        (0..self.classes.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "prediction has {} entries, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Maximum-weight assignment of rows to columns.
///
/// Rectangular inputs are padded with zero rows or columns. The mapping has
/// one entry per original row: `Some(col)` for a real column, `None` when the
/// row was matched to padding.
pub fn hungarian_max_assignment(weights: &[Vec<f64>]) -> Result<(Vec<Option<usize>>, f64)> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("assignment matrix is empty".into()));
    }
    if weights.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("assignment matrix rows differ in length".into()));
    }
    if weights.iter().flatten().any(|w| !w.is_finite()) {
        return Err(Error::InvalidArgument("assignment weights must be finite".into()));
    }
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0.0
        }
    };

    // Shortest augmenting path with potentials; 1-based with a sentinel at 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut mapping = vec![None; rows];
    let mut total = 0.0;
    for j in 1..=n {
        let i = row_of_col[j] - 1;
        if i < rows && j - 1 < cols {
            mapping[i] = Some(j - 1);
            total += weights[i][j - 1];
        }
    }
    Ok((mapping, total))
}

/// Cluster id to class id, from a maximum-weight matching on the
/// contingency table. Unmatched clusters are absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterClassMap(pub BTreeMap<usize, usize>);

impl ClusterClassMap {
    pub fn from_table(table: &ContingencyTable) -> Result<Self> {
        let weights: Vec<Vec<f64>> = table
            .counts
            .iter()
            .map(|r| r.iter().map(|&c| c as f64).collect())
            .collect();
        let (mapping, _) = hungarian_max_assignment(&weights)?;
        Ok(Self(
            mapping
                .into_iter()
                .enumerate()
                .filter_map(|(r, c)| c.map(|c| (table.clusters[r], table.classes[c])))
                .collect(),
        ))
    }

    pub fn correct(&self, pred: &[usize], truth: &[usize]) -> usize {
        pred.iter()
            .zip(truth)
            .filter(|(p, t)| self.0.get(p) == Some(t))
            .count()
    }
}

/// Fraction of samples correct under the best one-to-one cluster-to-class map.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty labelling".into()));
    }
    let map = ClusterClassMap::from_table(&table)?;
    Ok(map.correct(pred, truth) as f64 / pred.len() as f64)
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies. Returns 0 when both entropies are 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let n = pred.len() as f64;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let (a, b) = (table.row_sums(), table.col_sums());
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    let denom = (entropy(&a, n) + entropy(&b, n)) / 2.0;
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("ARI needs at least two samples".into()));
    }
    let index: f64 = table.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = table.row_sums().into_iter().map(comb2).sum();
    let sum_b: f64 = table.col_sums().into_iter().map(comb2).sum();
    let expected = sum_a * sum_b / comb2(pred.len());
    let max_index = (sum_a + sum_b) / 2.0;
    let denom = max_index - expected;
    if denom == 0.0 {
        // both partitions trivial in the same way
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Mean silhouette with Euclidean distances. Samples in singleton clusters
/// score 0. Needs at least two non-empty clusters.
pub fn silhouette(z: &EmbeddingMatrix, a: &Assignment) -> Result<f64> {
    if a.len() != z.n_samples() {
        return Err(Error::Shape(format!(
            "assignment has {} entries, embeddings have {} rows",
            a.len(),
            z.n_samples()
        )));
    }
    let sizes = a.cluster_sizes();
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InvalidArgument(
            "silhouette is undefined with fewer than two non-empty clusters".into(),
        ));
    }
    let n = z.n_samples();
    let dim = z.dim();
    let data = z.as_slice();
    let labels = &a.cluster_of;
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let xi = &data[i * dim..(i + 1) * dim];
            let mut sums = vec![0.0; a.n_clusters];
            for j in 0..n {
                if j != i {
                    let xj = &data[j * dim..(j + 1) * dim];
                    sums[labels[j]] += xi.iter().zip(xj).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                }
            }
            let intra = sums[own] / (sizes[own] - 1) as f64;
            let nearest = (0..a.n_clusters)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = intra.max(nearest);
            if m == 0.0 {
                0.0
            } else {
                (nearest - intra) / m
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub n: usize,
    /// Samples whose cluster maps to their class under the global map.
    pub correct: usize,
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub silhouette: f64,
}

/// Scores on the combined, unlabelled (new) and labelled (old) subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub all: SubsetMetrics,
    pub new: SubsetMetrics,
    pub old: SubsetMetrics,
}

fn subset_metrics(
    indices: &[usize],
    pred: &[usize],
    truth: &[usize],
    map: &ClusterClassMap,
    z: &EmbeddingMatrix,
    n_clusters: usize,
) -> Result<SubsetMetrics> {
    let p: Vec<usize> = indices.iter().map(|&i| pred[i]).collect();
    let t: Vec<usize> = indices.iter().map(|&i| truth[i]).collect();
    let n = indices.len();
    let correct = map.correct(&p, &t);
    if n < 2 {
        return Ok(SubsetMetrics {
            n,
            correct,
            acc: if n == 0 { 0.0 } else { correct as f64 },
            nmi: 0.0,
            ari: 0.0,
            silhouette: 0.0,
        });
    }
    let sub_assignment = Assignment::new(p.clone(), n_clusters)?;
    let used = sub_assignment.cluster_sizes().iter().filter(|&&s| s > 0).count();
    // A subset that falls entirely inside one cluster has no silhouette; report 0.
    let sil = if used >= 2 {
        silhouette(&z.select_rows(indices), &sub_assignment)?
    } else {
        0.0
    };
    Ok(SubsetMetrics {
        n,
        correct,
        acc: correct as f64 / n as f64,
        nmi: nmi(&p, &t)?,
        ari: ari(&p, &t)?,
        silhouette: sil,
    })
}

/// Old/New/All report for `pred` over dataset `d`, with silhouettes computed
/// on `z` (the embeddings that were clustered).
pub fn subset_report(pred: &Assignment, d: &Dataset, z: &EmbeddingMatrix) -> Result<MetricReport> {
    let n = d.n_samples();
    if pred.len() != n || z.n_samples() != n {
        return Err(Error::Shape(format!(
            "assignment ({}), embeddings ({}) and dataset ({n}) sizes differ",
            pred.len(),
            z.n_samples()
        )));
    }
    let truth = d.ground_truth()?;
    let labels = &pred.cluster_of;
    let map = ClusterClassMap::from_table(&ContingencyTable::new(labels, &truth)?)?;
    let all: Vec<usize> = (0..n).collect();
    let old = d.indices_of(Split::Labelled);
    let new = d.indices_of(Split::Unlabelled);
    Ok(MetricReport {
        all: subset_metrics(&all, labels, &truth, &map, z, pred.n_clusters)?,
        new: subset_metrics(&new, labels, &truth, &map, z, pred.n_clusters)?,
        old: subset_metrics(&old, labels, &truth, &map, z, pred.n_clusters)?,
    })
}
