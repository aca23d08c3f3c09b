//! Generalized category discovery over precomputed embeddings.
//!
//! A small residual encoder is trained with a mix of supervised (label) and
//! unsupervised (same-source) contrastive losses, its outputs are clustered,
//! and the clustering is scored on the labelled, unlabelled and combined
//! subsets.

pub mod cli;
pub mod clustering;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod simgeom;
pub mod trainer;

pub use config::{LossReduction, TrainConfig};
pub use dataset::{Assignment, Dataset, EmbeddingMatrix, SampleMeta, Split};
pub use error::{Error, Result};
