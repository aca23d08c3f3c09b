//! Synthetic class -> source -> clip embedding generator.
//!
//! Each class gets a centroid in a uniformly random direction at distance
//! `class_spread` from the origin. Each source (a long recording) is the class
//! centroid plus Gaussian noise of scale `source_sigma`, and each clip is its
//! source mean plus Gaussian noise of scale `clip_sigma`. The first
//! `n_old_classes` classes are labelled; the rest are unlabelled with hidden
//! truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EmbeddingMatrix, SampleMeta, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_old_classes: usize,
    pub n_new_classes: usize,
    pub sources_per_class: usize,
    pub clips_per_source: usize,
    pub dim: usize,
    pub class_spread: f64,
    pub source_sigma: f64,
    pub clip_sigma: f64,
    /// When set, class 1 is placed at this distance (in units of
    /// `class_spread`) from class 0 instead of independently.
    pub overlap: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_old_classes: 8,
            n_new_classes: 4,
            sources_per_class: 6,
            clips_per_source: 10,
            dim: 64,
            class_spread: 10.0,
            source_sigma: 0.5,
            clip_sigma: 0.5,
            overlap: None,
            seed: 0,
        }
    }
}

/// Separation used by [`SynthConfig::overlapping`].
pub const DEFAULT_OVERLAP: f64 = 0.3;

impl SynthConfig {
    /// Defaults with classes 0 and 1 (both labelled) pushed close together.
    pub fn overlapping(seed: u64) -> Self {
        Self {
            overlap: Some(DEFAULT_OVERLAP),
            seed,
            ..Self::default()
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_old_classes + self.n_new_classes
    }

    pub fn n_samples(&self) -> usize {
        self.n_classes() * self.sources_per_class * self.clips_per_source
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_old_classes", self.n_old_classes),
            ("n_new_classes", self.n_new_classes),
            ("sources_per_class", self.sources_per_class),
            ("clips_per_source", self.clips_per_source),
            ("dim", self.dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if !(self.class_spread > 0.0 && self.class_spread.is_finite()) {
            return Err(Error::InvalidArgument("class_spread must be > 0".into()));
        }
        for (name, v) in [("source_sigma", self.source_sigma), ("clip_sigma", self.clip_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0")));
            }
        }
        if let Some(o) = self.overlap {
            if !(o >= 0.0 && o.is_finite()) {
                return Err(Error::InvalidArgument("overlap must be >= 0".into()));
            }
            if self.n_classes() < 2 {
                return Err(Error::InvalidArgument("overlap needs at least two classes".into()));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Class centroids only; exposed for tests of the geometry.
pub fn class_centroids(cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(centroids(cfg, &mut rng))
}

fn centroids(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..cfg.n_classes())
        .map(|_| unit(rng, cfg.dim).into_iter().map(|x| x * cfg.class_spread).collect())
        .collect();
    if let Some(o) = cfg.overlap {
        let dir = unit(rng, cfg.dim);
        out[1] = out[0]
            .iter()
            .zip(&dir)
            .map(|(c, d)| c + o * cfg.class_spread * d)
            .collect();
    }
    out
}

/// Generate a dataset with full hidden ground truth. Deterministic in `seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = centroids(cfg, &mut rng);
    let mut meta = Vec::with_capacity(cfg.n_samples());
    let mut values = Vec::with_capacity(cfg.n_samples() * cfg.dim);
    for (class, center) in centers.iter().enumerate() {
        let split = if class < cfg.n_old_classes {
            Split::Labelled
        } else {
            Split::Unlabelled
        };
        for source in 0..cfg.sources_per_class {
            let offset = gaussian(&mut rng, cfg.dim, cfg.source_sigma);
            let source_mean: Vec<f64> = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
            let source_id = format!("class{class:02}-rec{source:02}");
            for clip in 0..cfg.clips_per_source {
                let noise = gaussian(&mut rng, cfg.dim, cfg.clip_sigma);
                values.extend(source_mean.iter().zip(&noise).map(|(m, e)| m + e));
                meta.push(SampleMeta {
                    sample_id: format!("{source_id}-clip{clip:03}"),
                    source_id: source_id.clone(),
                    label: (split == Split::Labelled).then_some(class),
                    split,
                    truth: (split == Split::Unlabelled).then_some(class),
                });
            }
        }
    }
    let features = EmbeddingMatrix::from_vec(meta.len(), cfg.dim, values)?;
    Dataset::new(meta, features)
}
