//! Positive/negative set construction and the contrastive losses.
//!
//! Both losses share one per-positive InfoNCE form: for anchor `i`, each
//! positive `p` contributes
//!
//! ```text
//! -log( e^{s(i,p)/tau} / (e^{s(i,p)/tau} + sum_{k in N_i} e^{s(i,k)/tau}) )
//! ```
//!
//! averaged over the anchor's positives. The denominator holds the current
//! positive and the negatives only, never the other positives.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::LossReduction;
use crate::dataset::{EmbeddingMatrix, TrainingView};
use crate::error::{Error, Result};
use crate::simgeom::{ascending_order, row_norms, SimilarityMatrix};

/// Positives and negatives for one anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnchorPairs {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Pair sets for every anchor that has at least one positive, plus the
/// anchors that were skipped for lack of positives.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PairSets {
    pub anchors: Vec<AnchorPairs>,
    pub skipped: Vec<usize>,
}

/// The `count` candidates least similar to `anchor`, in ascending similarity
/// order with ties broken by index. Returns every candidate on shortfall.
pub fn mine_hard_negatives(anchor: usize, candidates: &[usize], s: &SimilarityMatrix, count: usize) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::NoNegatives { anchor });
    }
    if count == 0 {
        return Err(Error::InvalidArgument("negative count must be >= 1".into()));
    }
    if candidates.contains(&anchor) {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor} must not be among its own candidates"
        )));
    }
    let order = ascending_order(s, anchor);
    let mut c = candidates.to_vec();
    if c.len() > count {
        c.select_nth_unstable_by(count - 1, &order);
        c.truncate(count);
    }
    c.sort_by(&order);
    Ok(c)
}

/// Supervised pairs over the labelled samples of `view`.
///
/// Positives are all other samples with the anchor's label; negatives are the
/// hardest `count_neg` labelled samples with a different label.
pub fn build_supervised_pairs(view: &TrainingView<'_>, s: &SimilarityMatrix, count_neg: usize) -> Result<PairSets> {
    check_sim_size(view, s)?;
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in view.labels.iter().enumerate() {
        if let Some(l) = l {
            by_label.entry(*l).or_default().push(i);
        }
    }
    if by_label.is_empty() {
        return Err(Error::NoLabelled);
    }
    let labelled: Vec<usize> = by_label.values().flatten().copied().collect();
    let mut labelled_sorted = labelled.clone();
    labelled_sorted.sort_unstable();

    let results: Vec<Result<Option<AnchorPairs>>> = labelled_sorted
        .par_iter()
        .map(|&i| {
            let y = view.labels[i].expect("labelled");
            let positives: Vec<usize> = by_label[&y].iter().copied().filter(|&p| p != i).collect();
            if positives.is_empty() {
                return Ok(None);
            }
            let candidates: Vec<usize> = labelled_sorted
                .iter()
                .copied()
                .filter(|&k| view.labels[k] != Some(y))
                .collect();
            let negatives = mine_hard_negatives(i, &candidates, s, count_neg)?;
            Ok(Some(AnchorPairs {
                anchor: i,
                positives,
                negatives,
            }))
        })
        .collect();
    collect_pairs(&labelled_sorted, results)
}

/// Unsupervised pairs over every sample, ignoring labels.
///
/// Positives are up to `count_pos` other clips of the anchor's source, drawn
/// without replacement from `rng` (anchors are visited in index order, so the
/// draws are reproducible). Negatives are the hardest `count_neg` samples
/// from other sources.
pub fn build_unsupervised_pairs<R: Rng + ?Sized>(
    view: &TrainingView<'_>,
    s: &SimilarityMatrix,
    count_pos: usize,
    count_neg: usize,
    rng: &mut R,
) -> Result<PairSets> {
    check_sim_size(view, s)?;
    if count_pos == 0 {
        return Err(Error::InvalidArgument("positive count must be >= 1".into()));
    }
    let n = view.n_samples();
    let mut by_source: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &src) in view.sources.iter().enumerate() {
        by_source.entry(src).or_default().push(i);
    }

    // Draw all positives serially so the RNG stream is consumed in a fixed order.
    let positives: Vec<Vec<usize>> = (0..n)
        .map(|j| {
            let pool: Vec<usize> = by_source[&view.sources[j]].iter().copied().filter(|&p| p != j).collect();
            if pool.is_empty() {
                return Vec::new();
            }
            let take = count_pos.min(pool.len());
            let mut picked: Vec<usize> = index::sample(rng, pool.len(), take).into_iter().map(|k| pool[k]).collect();
            picked.sort_unstable();
            picked
        })
        .collect();

    let all: Vec<usize> = (0..n).collect();
    let results: Vec<Result<Option<AnchorPairs>>> = positives
        .into_par_iter()
        .enumerate()
        .map(|(j, positives)| {
            if positives.is_empty() {
                return Ok(None);
            }
            let candidates: Vec<usize> = (0..n).filter(|&k| view.sources[k] != view.sources[j]).collect();
            let negatives = mine_hard_negatives(j, &candidates, s, count_neg)?;
            Ok(Some(AnchorPairs {
                anchor: j,
                positives,
                negatives,
            }))
        })
        .collect();
    collect_pairs(&all, results)
}

fn check_sim_size(view: &TrainingView<'_>, s: &SimilarityMatrix) -> Result<()> {
    if s.n() != view.n_samples() {
        return Err(Error::Shape(format!(
            "similarity matrix is {0}x{0}, dataset has {1} samples",
            s.n(),
            view.n_samples()
        )));
    }
    Ok(())
}

fn collect_pairs(order: &[usize], results: Vec<Result<Option<AnchorPairs>>>) -> Result<PairSets> {
    let mut out = PairSets::default();
    for (&i, r) in order.iter().zip(results) {
        match r? {
            Some(a) => out.anchors.push(a),
            None => out.skipped.push(i),
        }
    }
    Ok(out)
}

/// Value and gradient of a contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Reduced loss.
    pub value: f64,
    /// Unreduced loss of each anchor, aligned with `PairSets::anchors`.
    pub per_anchor: Vec<f64>,
    /// Gradient of `value` with respect to the embeddings.
    pub grad: EmbeddingMatrix,
}

/// Per-anchor loss and `dL/ds(anchor, j)` for every partner `j`.
struct AnchorTerm {
    loss: f64,
    partials: Vec<(usize, f64)>,
}

/// `ln(1 + e^a)` without overflow or cancellation.
fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn anchor_term(a: &AnchorPairs, sim: impl Fn(usize) -> f64, tau: f64) -> Result<AnchorTerm> {
    if a.positives.is_empty() {
        return Err(Error::EmptyPositives { anchor: a.anchor });
    }
    if a.negatives.is_empty() {
        return Err(Error::NoNegatives { anchor: a.anchor });
    }
    // Per positive p the term is ln(1 + sum_k e^{(s_k - s_p)/tau}) = softplus(a_p)
    // with a_p = (top - s_p)/tau + ln(sum_k e^{(s_k - top)/tau}), so the
    // negative sum is shared by every positive of the anchor.
    let neg_sims: Vec<f64> = a.negatives.iter().map(|&k| sim(k)).collect();
    let top = neg_sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = neg_sims.iter().map(|&sk| ((sk - top) / tau).exp()).collect();
    let sum: f64 = scaled.iter().sum();
    let log_sum = sum.ln();
    let weight = 1.0 / a.positives.len() as f64;
    let mut loss = 0.0;
    let mut neg_mass = 0.0;
    let mut partials = Vec::with_capacity(a.positives.len() + a.negatives.len());
    for &p in &a.positives {
        let ap = (top - sim(p)) / tau + log_sum;
        loss += weight * softplus(ap);
        // softmax over {p} u N: 1 - sigma_p = sigmoid(a_p), which the negatives share
        let g = weight * sigmoid(ap);
        partials.push((p, -g / tau));
        neg_mass += g;
    }
    partials.extend(
        a.negatives
            .iter()
            .zip(&scaled)
            .map(|(&k, &e)| (k, neg_mass * (e / sum) / tau)),
    );
    Ok(AnchorTerm { loss, partials })
}

/// Shared implementation behind [`supervised_loss`] and [`unsupervised_loss`].
fn contrastive_loss(z: &EmbeddingMatrix, pairs: &PairSets, tau: f64, reduction: LossReduction) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let n = z.n_samples();
    let dim = z.dim();
    if let Some(bad) = pairs
        .anchors
        .iter()
        .flat_map(|a| std::iter::once(a.anchor).chain(a.positives.iter().copied()).chain(a.negatives.iter().copied()))
        .find(|&i| i >= n)
    {
        return Err(Error::Shape(format!("pair index {bad} out of range for {n} samples")));
    }
    let norms = row_norms(z)?;
    let units: Vec<f64> = z
        .as_slice()
        .chunks_exact(dim.max(1))
        .zip(&norms)
        .flat_map(|(r, &nr)| r.iter().map(move |v| v / nr))
        .collect();
    let unit = |i: usize| &units[i * dim..(i + 1) * dim];
    let unit_dot = |i: usize, j: usize| -> f64 { unit(i).iter().zip(unit(j)).map(|(a, b)| a * b).sum::<f64>() };

    let terms: Vec<AnchorTerm> = pairs
        .anchors
        .par_iter()
        .map(|a| anchor_term(a, |j| unit_dot(a.anchor, j).clamp(-1.0, 1.0), tau))
        .collect::<Result<_>>()?;

    let scale = match reduction {
        LossReduction::Sum => 1.0,
        LossReduction::Mean if terms.is_empty() => 0.0,
        LossReduction::Mean => 1.0 / terms.len() as f64,
    };

    // d s_ij / d z_i = (u_j - s_ij u_i) / |z_i|, and symmetrically for z_j.
    // Fixed anchor order keeps accumulation deterministic.
    let mut grad = vec![0.0; n * dim];
    let mut value = 0.0;
    for (a, t) in pairs.anchors.iter().zip(&terms) {
        value += t.loss;
        let i = a.anchor;
        for &(j, c) in &t.partials {
            let c = c * scale;
            let s = unit_dot(i, j);
            let (ci, cj) = (c / norms[i], c / norms[j]);
            for k in 0..dim {
                let (ui, uj) = (units[i * dim + k], units[j * dim + k]);
                grad[i * dim + k] += ci * (uj - s * ui);
                grad[j * dim + k] += cj * (ui - s * uj);
            }
        }
    }
    Ok(LossOutput {
        value: value * scale,
        per_anchor: terms.iter().map(|t| t.loss).collect(),
        grad: EmbeddingMatrix::from_vec(n, dim, grad)?,
    })
}

/// Supervised contrastive loss over labelled anchors.
pub fn supervised_loss(z: &EmbeddingMatrix, pairs: &PairSets, tau: f64, reduction: LossReduction) -> Result<LossOutput> {
    contrastive_loss(z, pairs, tau, reduction)
}

/// Unsupervised contrastive loss over same-source anchors.
pub fn unsupervised_loss(z: &EmbeddingMatrix, pairs: &PairSets, tau: f64, reduction: LossReduction) -> Result<LossOutput> {
    contrastive_loss(z, pairs, tau, reduction)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    /// `(1 - lambda) * supervised + lambda * unsupervised`
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub grad: EmbeddingMatrix,
}

pub fn combined_loss(
    z: &EmbeddingMatrix,
    sup_pairs: &PairSets,
    unsup_pairs: &PairSets,
    tau: f64,
    lambda: f64,
    reduction: LossReduction,
) -> Result<CombinedLoss> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let sup = supervised_loss(z, sup_pairs, tau, reduction)?;
    let unsup = unsupervised_loss(z, unsup_pairs, tau, reduction)?;
    let grad = sup.grad.into_array() * (1.0 - lambda) + unsup.grad.into_array() * lambda;
    Ok(CombinedLoss {
        total: (1.0 - lambda) * sup.value + lambda * unsup.value,
        supervised: sup.value,
        unsupervised: unsup.value,
        grad: EmbeddingMatrix::new(grad)?,
    })
}
