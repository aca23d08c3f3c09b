//! K-means (greedy k-means++ seeding, Lloyd iterations, best of several restarts)
//! and cosine-threshold clustering.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Assignment, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::simgeom::{similarity_matrix, SimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub n_restarts: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            n_restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Assignment,
    /// `k x dim`
    pub centroids: EmbeddingMatrix,
    /// Sum of squared Euclidean distances to the assigned centroid.
    pub inertia: f64,
    /// Lloyd iterations performed by the winning restart.
    pub iterations: usize,
    /// Inertia after the initial assignment and after every iteration of the
    /// winning restart.
    pub inertia_history: Vec<f64>,
    /// Inertia histories of every restart, in restart order.
    pub restart_histories: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Points<'a> {
    data: &'a [f64],
    n: usize,
    dim: usize,
}

impl Points<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Nearest centroid for each point (ties to the lower index), the squared
/// distance to it, and the total.
fn assign(points: &Points<'_>, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, f64) {
    let (labels, dists): (Vec<usize>, Vec<f64>) = (0..points.n)
        .into_par_iter()
        .map(|i| {
            let x = points.row(i);
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(x, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip();
    let total = dists.iter().sum();
    (labels, dists, total)
}

/// Greedy k-means++: each new centroid is the best of `2 + ln k` candidates
/// drawn in proportion to squared distance, judged by the resulting potential.
fn plus_plus_seed(points: &Points<'_>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = vec![points.row(rng.random_range(0..points.n)).to_vec()];
    let mut d2: Vec<f64> = (0..points.n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let candidates: Vec<usize> = match WeightedIndex::new(&d2) {
            Ok(w) => (0..trials).map(|_| w.sample(rng)).collect(),
            // every point coincides with a centroid already
            Err(_) => vec![rng.random_range(0..points.n)],
        };
        let (best_d2, best) = candidates
            .iter()
            .map(|&c| {
                let row = points.row(c);
                let next: Vec<f64> = (0..points.n)
                    .into_par_iter()
                    .map(|i| d2[i].min(sq_dist(points.row(i), row)))
                    .collect();
                (next, c)
            })
            .min_by(|a, b| a.0.iter().sum::<f64>().total_cmp(&b.0.iter().sum::<f64>()))
            .expect("at least one candidate");
        d2 = best_d2;
        centroids.push(points.row(best).to_vec());
    }
    centroids
}

/// Recompute centroids as member means. An empty cluster is re-seeded at the
/// point farthest from its own centroid, taken only from clusters that keep
/// at least one other member.
fn update_centroids(points: &Points<'_>, labels: &[usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let mut sums = vec![vec![0.0; points.dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let inv = counts[c] as f64;
            centroids[c] = sums[c].iter().map(|s| s / inv).collect();
        }
    }
    let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if empties.is_empty() {
        return;
    }
    let mut by_distance: Vec<(f64, usize)> = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| (sq_dist(points.row(i), &centroids[c]), i))
        .collect();
    by_distance.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut candidates = by_distance.into_iter();
    for c in empties {
        for (_, i) in candidates.by_ref() {
            let owner = labels[i];
            if counts[owner] > 1 {
                counts[owner] -= 1;
                counts[c] = 1;
                centroids[c] = points.row(i).to_vec();
                break;
            }
        }
    }
}

struct Run {
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
    iterations: usize,
    history: Vec<f64>,
}

fn lloyd(points: &Points<'_>, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> Run {
    let mut centroids = plus_plus_seed(points, k, rng);
    let (mut labels, _, mut inertia) = assign(points, &centroids);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iter {
        update_centroids(points, &labels, &mut centroids);
        let (next, _, next_inertia) = assign(points, &centroids);
        iterations += 1;
        history.push(next_inertia);
        let changed = next != labels;
        labels = next;
        inertia = next_inertia;
        if !changed {
            break;
        }
    }
    Run {
        labels,
        centroids,
        inertia,
        iterations,
        history,
    }
}

/// Euclidean k-means on the raw rows of `z`.
pub fn kmeans(z: &EmbeddingMatrix, params: &KMeansParams) -> Result<KMeansResult> {
    let n = z.n_samples();
    let k = params.k;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k must be in [1, {n}], got {k}")));
    }
    if params.n_restarts == 0 {
        return Err(Error::InvalidArgument("n_restarts must be >= 1".into()));
    }
    let points = Points {
        data: z.as_slice(),
        n,
        dim: z.dim(),
    };
    let runs: Vec<Run> = (0..params.n_restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(r as u64);
            lloyd(&points, k, params.max_iter, &mut rng)
        })
        .collect();
    let restart_histories = runs.iter().map(|r| r.history.clone()).collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.inertia.total_cmp(&b.inertia).then(ia.cmp(ib)))
        .map(|(_, r)| r)
        .expect("at least one restart");

    let centroids = Array2::from_shape_vec((k, z.dim()), best.centroids.concat())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(KMeansResult {
        assignment: Assignment::new(best.labels, k)?,
        centroids: EmbeddingMatrix::new(centroids)?,
        inertia: best.inertia,
        iterations: best.iterations,
        inertia_history: best.history,
        restart_histories,
    })
}

/// Connected components of the graph linking every pair with cosine
/// similarity `>= delta`. Cluster ids follow first appearance in row order.
pub fn threshold_cluster(z: &EmbeddingMatrix, delta: f64) -> Result<Assignment> {
    if delta.is_nan() {
        return Err(Error::InvalidArgument("delta must not be NaN".into()));
    }
    threshold_cluster_similarities(&similarity_matrix(z)?, delta)
}

/// [`threshold_cluster`] over a precomputed similarity matrix.
pub fn threshold_cluster_similarities(s: &SimilarityMatrix, delta: f64) -> Result<Assignment> {
    if delta.is_nan() {
        return Err(Error::InvalidArgument("delta must not be NaN".into()));
    }
    let n = s.n();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if s.get(i, j) >= delta {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut id_of_root = vec![usize::MAX; n];
    let mut next = 0;
    let mut cluster_of = Vec::with_capacity(n);
    for i in 0..n {
        let r = find(&mut parent, i);
        if id_of_root[r] == usize::MAX {
            id_of_root[r] = next;
            next += 1;
        }
        cluster_of.push(id_of_root[r]);
    }
    Assignment::new(cluster_of, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::clustering_accuracy;
    use rand_distr::StandardNormal;

    fn blobs(per: usize, centers: &[[f64; 2]], seed: u64) -> (EmbeddingMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                rows.push(vec![center[0] + 0.5 * dx, center[1] + 0.5 * dy]);
                truth.push(c);
            }
        }
        (EmbeddingMatrix::from_rows(&rows).unwrap(), truth)
    }

    #[test]
    fn two_pairs() {
        let z = EmbeddingMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]]).unwrap();
        let r = kmeans(&z, &KMeansParams::new(2, 1)).unwrap();
        let c = &r.assignment.cluster_of;
        assert_eq!(c[0], c[1]);
        assert_eq!(c[2], c[3]);
        assert_ne!(c[0], c[2]);
        assert_eq!(r.centroids.row(c[0]).to_vec(), vec![0.0, 0.5]);
        assert_eq!(r.centroids.row(c[2]).to_vec(), vec![10.0, 0.5]);
        assert!((r.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_is_mean() {
        let (z, _) = blobs(10, &[[1.0, 2.0], [4.0, -1.0]], 3);
        let r = kmeans(&z, &KMeansParams::new(1, 0)).unwrap();
        let n = z.n_samples() as f64;
        let mean = z.as_array().mean_axis(ndarray::Axis(0)).unwrap();
        let var_sum: f64 = z.as_array().outer_iter().map(|r| sq_dist(r.as_slice().unwrap(), mean.as_slice().unwrap())).sum::<f64>() / n;
        for k in 0..2 {
            assert!((r.centroids.row(0)[k] - mean[k]).abs() < 1e-12);
        }
        assert!((r.inertia - var_sum * n).abs() < 1e-9);
    }

    #[test]
    fn three_gaussians_recovered() {
        let (z, truth) = blobs(20, &[[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]], 4);
        let r = kmeans(&z, &KMeansParams::new(3, 9)).unwrap();
        assert_eq!(clustering_accuracy(&r.assignment.cluster_of, &truth).unwrap(), 1.0);
    }

    #[test]
    fn k_out_of_range() {
        let (z, _) = blobs(2, &[[0.0, 0.0]], 1);
        assert!(kmeans(&z, &KMeansParams::new(3, 0)).is_err());
        assert!(kmeans(&z, &KMeansParams::new(0, 0)).is_err());
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..10 {
            let (z, _) = blobs(15, &[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [2.0, 2.0]], seed);
            let r = kmeans(&z, &KMeansParams::new(5, seed)).unwrap();
            for h in &r.restart_histories {
                assert!(h.windows(2).all(|w| w[1] <= w[0]), "{h:?}");
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let (z, _) = blobs(15, &[[0.0, 0.0], [3.0, 0.0]], 2);
        let a = kmeans(&z, &KMeansParams::new(3, 4)).unwrap();
        let b = kmeans(&z, &KMeansParams::new(3, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_points_fill_every_cluster() {
        let z = EmbeddingMatrix::from_rows(&vec![vec![1.0, 1.0]; 5]).unwrap();
        let r = kmeans(&z, &KMeansParams::new(3, 0)).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.assignment.n_clusters, 3);
    }

    #[test]
    fn permutation_invariant_up_to_relabel() {
        let (z, _) = blobs(15, &[[0.0, 0.0], [15.0, 0.0], [0.0, 15.0]], 6);
        let a = kmeans(&z, &KMeansParams::new(3, 1)).unwrap();
        let n = z.n_samples();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let b = kmeans(&z.select_rows(&perm), &KMeansParams::new(3, 1)).unwrap();
        let a_perm: Vec<usize> = perm.iter().map(|&i| a.assignment.cluster_of[i]).collect();
        assert_eq!(clustering_accuracy(&b.assignment.cluster_of, &a_perm).unwrap(), 1.0);
    }

    #[test]
    fn threshold_extremes() {
        let (z, _) = blobs(5, &[[1.0, 0.0], [-1.0, 0.3]], 1);
        let all = threshold_cluster(&z, -1.0).unwrap();
        assert_eq!(all.n_clusters, 1);
        let none = threshold_cluster(&z, 1.5).unwrap();
        assert_eq!(none.n_clusters, 10);
        assert_eq!(none.cluster_of, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn threshold_transitive_closure() {
        // Not realizable by actual vectors (the Gram matrix is indefinite),
        // so the similarities are given directly.
        let s = SimilarityMatrix::from_array(ndarray::array![[1.0, 0.9, 0.1], [0.9, 1.0, 0.9], [0.1, 0.9, 1.0]]).unwrap();
        assert_eq!(threshold_cluster_similarities(&s, 0.5).unwrap().cluster_of, vec![0, 0, 0]);
        assert_eq!(threshold_cluster_similarities(&s, 0.95).unwrap().cluster_of, vec![0, 1, 2]);

        let z = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]]).unwrap();
        assert_eq!(threshold_cluster(&z, 0.5).unwrap().cluster_of, vec![0, 0, 0]);
    }

    #[test]
    fn threshold_monotone_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..15).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let z = EmbeddingMatrix::from_rows(&rows).unwrap();
            let lo = rng.random_range(-0.5..0.9);
            let hi = lo + rng.random_range(0.0..0.5);
            let a = threshold_cluster(&z, lo).unwrap().cluster_of;
            let b = threshold_cluster(&z, hi).unwrap().cluster_of;
            // every pair split at the low threshold stays split at the high one
            for i in 0..15 {
                for j in 0..15 {
                    if a[i] != a[j] {
                        assert_ne!(b[i], b[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn threshold_zero_row_is_error() {
        let z = EmbeddingMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(threshold_cluster(&z, 0.5).is_err());
    }
}
