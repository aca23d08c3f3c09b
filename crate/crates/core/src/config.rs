use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-anchor loss terms are combined into a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Sum,
    #[default]
    Mean,
}

impl std::str::FromStr for LossReduction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sum" => Ok(LossReduction::Sum),
            "mean" => Ok(LossReduction::Mean),
            other => Err(format!("unknown loss reduction {other:?} (expected sum|mean)")),
        }
    }
}

/// Training hyperparameters for the joint contrastive objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of the unsupervised term; `1 - lambda` weighs the supervised term.
    pub lambda: f64,
    /// Same-source positives sampled per unsupervised anchor.
    pub n_pos_unsup: usize,
    /// Hard negatives kept per anchor.
    pub n_neg: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss_reduction: LossReduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.5,
            n_pos_unsup: 5,
            n_neg: 50,
            epochs: 200,
            learning_rate: 1e-3,
            loss_reduction: LossReduction::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.n_pos_unsup == 0 {
            return Err(Error::InvalidArgument("n_pos_unsup must be >= 1".into()));
        }
        if self.n_neg == 0 {
            return Err(Error::InvalidArgument("n_neg must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}
