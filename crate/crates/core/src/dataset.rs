//! Shared domain types: sample metadata, embedding matrices, datasets and
//! cluster assignments.
//!
//! Ground truth for unlabelled samples is stored on [`SampleMeta`] but is not
//! reachable from [`TrainingView`], which is the only thing training code
//! receives.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labelled,
    Unlabelled,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labelled => "labelled",
            Split::Unlabelled => "unlabelled",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "labelled" => Ok(Split::Labelled),
            "unlabelled" => Ok(Split::Unlabelled),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Per-sample metadata.
///
/// `label` is the training-visible class and is only meaningful for
/// labelled samples. `truth` carries evaluation-only ground truth; for
/// labelled samples it may be left empty, in which case `label` is the truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub sample_id: String,
    pub source_id: String,
    pub label: Option<usize>,
    pub split: Split,
    pub truth: Option<usize>,
}

impl SampleMeta {
    /// Ground-truth class, if known from either column.
    pub fn ground_truth(&self) -> Option<usize> {
        match self.split {
            Split::Labelled => self.label.or(self.truth),
            Split::Unlabelled => self.truth,
        }
    }
}

/// Row-major matrix of finite 64-bit vectors, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Array2<f64>);

impl EmbeddingMatrix {
    pub fn new(array: Array2<f64>) -> Result<Self> {
        if let Some(pos) = array.iter().position(|v| !v.is_finite()) {
            let dim = array.ncols().max(1);
            return Err(Error::NonFiniteValue {
                row: pos / dim,
                column: pos % dim,
            });
        }
        Ok(Self(array.as_standard_layout().into_owned()))
    }

    pub fn from_vec(n_samples: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        let array = Array2::from_shape_vec((n_samples, dim), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(array)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Shape(format!(
                "row {i} has length {}, expected {dim}",
                rows[i].len()
            )));
        }
        Self::from_vec(rows.len(), dim, rows.concat())
    }

    pub fn n_samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    /// Row-major slice of all values.
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    /// Rows `indices` in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self(self.0.select(Axis(0), indices))
    }
}

/// Aligned sample metadata and feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: Vec<SampleMeta>,
    pub features: EmbeddingMatrix,
}

/// Which dataset rule a [`Violation`] broke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    RowCountMismatch,
    EmptySourceId,
    DuplicateSampleId,
    LabelledWithoutLabel,
    UnlabelledWithVisibleLabel,
    LabelTruthConflict,
    SourceLabelConflict,
    NonFiniteFeature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub indices: Vec<usize>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at sample(s) {:?}", self.rule, self.indices)
    }
}

/// Check every dataset invariant and report each violation. Never fails.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = d.features.n_samples();
    if d.meta.len() != n {
        out.push(Violation {
            indices: vec![d.meta.len(), n],
            rule: Rule::RowCountMismatch,
        });
    }
    for (i, row) in d.features.0.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            out.push(Violation {
                indices: vec![i],
                rule: Rule::NonFiniteFeature,
            });
        }
    }

    let mut seen_ids: HashMap<&str, usize> = HashMap::new();
    for (i, m) in d.meta.iter().enumerate() {
        if m.source_id.is_empty() {
            out.push(Violation {
                indices: vec![i],
                rule: Rule::EmptySourceId,
            });
        }
        if let Some(&first) = seen_ids.get(m.sample_id.as_str()) {
            out.push(Violation {
                indices: vec![first, i],
                rule: Rule::DuplicateSampleId,
            });
        } else {
            seen_ids.insert(&m.sample_id, i);
        }
        match m.split {
            Split::Labelled => {
                if m.label.is_none() {
                    out.push(Violation {
                        indices: vec![i],
                        rule: Rule::LabelledWithoutLabel,
                    });
                }
                if let (Some(l), Some(t)) = (m.label, m.truth) {
                    if l != t {
                        out.push(Violation {
                            indices: vec![i],
                            rule: Rule::LabelTruthConflict,
                        });
                    }
                }
            }
            Split::Unlabelled => {
                if m.label.is_some() {
                    out.push(Violation {
                        indices: vec![i],
                        rule: Rule::UnlabelledWithVisibleLabel,
                    });
                }
            }
        }
    }

    // A source must be all-same-truth or all-unknown. Report against the
    // first member of the source.
    let mut first_of_source: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, m) in d.meta.iter().enumerate() {
        match first_of_source.get(m.source_id.as_str()) {
            None => {
                first_of_source.insert(&m.source_id, i);
            }
            Some(&first) => {
                if d.meta[first].ground_truth() != m.ground_truth() {
                    out.push(Violation {
                        indices: vec![first, i],
                        rule: Rule::SourceLabelConflict,
                    });
                }
            }
        }
    }
    out
}

impl Dataset {
    pub fn new(meta: Vec<SampleMeta>, features: EmbeddingMatrix) -> Result<Self> {
        let d = Self { meta, features };
        let violations = validate_dataset(&d);
        if violations.is_empty() {
            Ok(d)
        } else {
            Err(Error::InvalidDataset(violations))
        }
    }

    pub fn n_samples(&self) -> usize {
        self.meta.len()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Label-masked view handed to training code.
    pub fn training_view(&self) -> TrainingView<'_> {
        let mut interned: HashMap<&str, usize> = HashMap::new();
        let sources = self
            .meta
            .iter()
            .map(|m| {
                let next = interned.len();
                *interned.entry(m.source_id.as_str()).or_insert(next)
            })
            .collect();
        let labels = self
            .meta
            .iter()
            .map(|m| match m.split {
                Split::Labelled => m.label,
                Split::Unlabelled => None,
            })
            .collect();
        TrainingView {
            features: &self.features,
            labels,
            sources,
        }
    }

    /// Ground truth for every sample. Evaluation code only.
    pub fn ground_truth(&self) -> Result<Vec<usize>> {
        self.meta
            .iter()
            .enumerate()
            .map(|(index, m)| m.ground_truth().ok_or(Error::MissingTruth { index }))
            .collect()
    }

    /// Number of distinct ground-truth classes among samples that have one.
    pub fn n_truth_classes(&self) -> usize {
        let mut classes: Vec<usize> = self.meta.iter().filter_map(|m| m.ground_truth()).collect();
        classes.sort_unstable();
        classes.dedup();
        classes.len()
    }
}

/// What training is allowed to see: features, visible labels for the
/// labelled split, and interned source identities. No unlabelled truth.
#[derive(Debug, Clone)]
pub struct TrainingView<'a> {
    pub features: &'a EmbeddingMatrix,
    /// `Some` only for labelled samples.
    pub labels: Vec<Option<usize>>,
    /// Dense source index per sample, in first-seen order.
    pub sources: Vec<usize>,
}

impl TrainingView<'_> {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }
}

/// Per-sample cluster index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub cluster_of: Vec<usize>,
    pub n_clusters: usize,
}

impl Assignment {
    pub fn new(cluster_of: Vec<usize>, n_clusters: usize) -> Result<Self> {
        if let Some(i) = cluster_of.iter().position(|&c| c >= n_clusters) {
            return Err(Error::InvalidArgument(format!(
                "sample {i} assigned to cluster {} but n_clusters = {n_clusters}",
                cluster_of[i]
            )));
        }
        Ok(Self {
            cluster_of,
            n_clusters,
        })
    }

    pub fn len(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_of.is_empty()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &c in &self.cluster_of {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Side table from dense class index to a human-readable name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassNames(pub BTreeMap<usize, String>);

impl ClassNames {
    pub fn name(&self, class: usize) -> Option<&str> {
        self.0.get(&class).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: &str, src: &str, label: Option<usize>, split: Split, truth: Option<usize>) -> SampleMeta {
        SampleMeta {
            sample_id: id.into(),
            source_id: src.into(),
            label,
            split,
            truth,
        }
    }

    fn features(n: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::from_vec(n, 2, (0..2 * n).map(|v| v as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn well_formed_dataset_has_no_violations() {
        let d = Dataset {
            meta: vec![
                meta("a", "s0", Some(0), Split::Labelled, None),
                meta("b", "s0", Some(0), Split::Labelled, Some(0)),
                meta("c", "s1", None, Split::Unlabelled, Some(1)),
            ],
            features: features(3),
        };
        assert!(validate_dataset(&d).is_empty());
    }

    #[test]
    fn labelled_sample_without_label() {
        let d = Dataset {
            meta: vec![
                meta("a", "s0", Some(0), Split::Labelled, None),
                meta("b", "s1", None, Split::Labelled, None),
            ],
            features: features(2),
        };
        let v = validate_dataset(&d);
        assert_eq!(
            v,
            vec![Violation {
                indices: vec![1],
                rule: Rule::LabelledWithoutLabel
            }]
        );
    }

    #[test]
    fn same_source_conflicting_truth_names_both() {
        // 0 and 2 share source "r" but disagree on truth; 1 is a bystander.
        let d = Dataset {
            meta: vec![
                meta("a", "r", Some(0), Split::Labelled, None),
                meta("b", "q", Some(1), Split::Labelled, None),
                meta("c", "r", None, Split::Unlabelled, Some(1)),
            ],
            features: features(3),
        };
        let v = validate_dataset(&d);
        assert_eq!(
            v,
            vec![Violation {
                indices: vec![0, 2],
                rule: Rule::SourceLabelConflict
            }]
        );
    }

    #[test]
    fn other_rules_fire() {
        let d = Dataset {
            meta: vec![
                meta("a", "", Some(0), Split::Labelled, Some(1)),
                meta("a", "s", Some(2), Split::Unlabelled, None),
            ],
            features: features(3),
        };
        let rules: Vec<Rule> = validate_dataset(&d).into_iter().map(|v| v.rule).collect();
        assert!(rules.contains(&Rule::RowCountMismatch));
        assert!(rules.contains(&Rule::EmptySourceId));
        assert!(rules.contains(&Rule::DuplicateSampleId));
        assert!(rules.contains(&Rule::LabelTruthConflict));
        assert!(rules.contains(&Rule::UnlabelledWithVisibleLabel));
    }

    #[test]
    fn validation_is_repeatable() {
        let d = Dataset {
            meta: vec![meta("a", "", None, Split::Labelled, None)],
            features: features(1),
        };
        assert_eq!(validate_dataset(&d), validate_dataset(&d));
    }

    #[test]
    fn training_view_masks_unlabelled_truth() {
        let d = Dataset {
            meta: vec![
                meta("a", "x", Some(3), Split::Labelled, None),
                meta("b", "y", None, Split::Unlabelled, Some(7)),
                meta("c", "x", Some(3), Split::Labelled, None),
            ],
            features: features(3),
        };
        let v = d.training_view();
        assert_eq!(v.labels, vec![Some(3), None, Some(3)]);
        assert_eq!(v.sources, vec![0, 1, 0]);
        assert_eq!(d.ground_truth().unwrap(), vec![3, 7, 3]);
    }

    #[test]
    fn embedding_rejects_nan() {
        assert!(EmbeddingMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn assignment_range_checked() {
        assert!(Assignment::new(vec![0, 2], 2).is_err());
        assert_eq!(Assignment::new(vec![0, 1, 1], 3).unwrap().cluster_sizes(), vec![1, 2, 0]);
    }
}
