//! Full-batch training loop for the encoder.
//!
//! Every epoch embeds all samples, re-mines pair sets from that epoch's
//! similarities, evaluates the combined loss and takes one Adam step.
//! Unsupervised positives are redrawn each epoch from a ChaCha stream keyed by
//! `(seed, epoch)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::{validate_dataset, Dataset, EmbeddingMatrix, Split};
use crate::encoder::{encoder_backward, encoder_forward, encoder_forward_raw, EncoderParams};
use crate::error::{Error, Result};
use crate::objective::{build_supervised_pairs, build_unsupervised_pairs, combined_loss};
use crate::simgeom::similarity_matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub supervised: f64,
    pub unsupervised: f64,
    pub total: f64,
    /// Anchors skipped for lack of positives.
    pub skipped_supervised: usize,
    pub skipped_unsupervised: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub first_moment: EncoderParams,
    pub second_moment: EncoderParams,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLoss>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: EncoderParams, seed: u64) -> Self {
        let zeros = EncoderParams::zeros(params.input_dim(), params.hidden_dim(), params.n_blocks())
            .expect("dims already validated");
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            params,
            epoch: 0,
            history: Vec::new(),
            seed,
        }
    }

    pub fn loss_history(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.total).collect()
    }

    fn adam_step(&mut self, grads: &EncoderParams, lr: f64) {
        let t = (self.epoch + 1) as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        self.first_moment
            .zip_apply(grads, |m, g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
        self.second_moment
            .zip_apply(grads, |v, g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
        let m = self.first_moment.to_flat();
        let v = self.second_moment.to_flat();
        let mut step = self.params.to_flat();
        for ((p, m), v) in step.iter_mut().zip(m).zip(v) {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
        }
        self.params.set_flat(&step).expect("same shape");
    }
}

fn check_trainable(d: &Dataset, cfg: &TrainConfig, init: &EncoderParams) -> Result<()> {
    cfg.validate()?;
    let violations = validate_dataset(d);
    if !violations.is_empty() {
        return Err(Error::InvalidDataset(violations));
    }
    if d.indices_of(Split::Labelled).is_empty() {
        return Err(Error::NoLabelled);
    }
    if d.indices_of(Split::Unlabelled).is_empty() {
        return Err(Error::InvalidArgument("dataset has no unlabelled samples".into()));
    }
    if init.input_dim() != d.features.dim() {
        return Err(Error::Shape(format!(
            "encoder input dim {} does not match feature dim {}",
            init.input_dim(),
            d.features.dim()
        )));
    }
    Ok(())
}

/// One epoch: returns the epoch's losses and applies the update to `state`.
fn run_epoch(state: &mut TrainState, d: &Dataset, cfg: &TrainConfig) -> Result<EpochLoss> {
    let epoch = state.epoch;
    step_epoch(state, d, cfg).map_err(|e| match e {
        Error::NonFiniteValue { row, column } => Error::NonFinite {
            epoch,
            what: format!("intermediate value at row {row}, column {column}"),
        },
        other => other,
    })
}

fn step_epoch(state: &mut TrainState, d: &Dataset, cfg: &TrainConfig) -> Result<EpochLoss> {
    let epoch = state.epoch;
    let view = d.training_view();
    let raw = encoder_forward_raw(&state.params, &d.features)?;
    if !raw.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            epoch,
            what: "encoder output".into(),
        });
    }
    let z = EmbeddingMatrix::new(raw)?;
    let s = similarity_matrix(&z)?;
    let sup = build_supervised_pairs(&view, &s, cfg.n_neg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    let unsup = build_unsupervised_pairs(&view, &s, cfg.n_pos_unsup, cfg.n_neg, &mut rng)?;
    let loss = combined_loss(&z, &sup, &unsup, cfg.tau, cfg.lambda, cfg.loss_reduction)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            what: format!(
                "loss (supervised {}, unsupervised {})",
                loss.supervised, loss.unsupervised
            ),
        });
    }
    let grads = encoder_backward(&state.params, &d.features, &loss.grad)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            what: "parameter gradient".into(),
        });
    }
    state.adam_step(&grads, cfg.learning_rate);
    if !state.params.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            what: "parameters after update".into(),
        });
    }
    let record = EpochLoss {
        epoch,
        supervised: loss.supervised,
        unsupervised: loss.unsupervised,
        total: loss.total,
        skipped_supervised: sup.skipped.len(),
        skipped_unsupervised: unsup.skipped.len(),
    };
    state.history.push(record);
    state.epoch += 1;
    Ok(record)
}

/// Train for `cfg.epochs` epochs, calling `on_epoch` after each one.
pub fn train_with<F>(d: &Dataset, cfg: &TrainConfig, init: EncoderParams, mut on_epoch: F) -> Result<(TrainState, EmbeddingMatrix)>
where
    F: FnMut(&EpochLoss),
{
    check_trainable(d, cfg, &init)?;
    let mut state = TrainState::new(init, cfg.seed);
    for _ in 0..cfg.epochs {
        let rec = run_epoch(&mut state, d, cfg)?;
        on_epoch(&rec);
    }
    let z = embed_all(&state, d)?;
    Ok((state, z))
}

pub fn train(d: &Dataset, cfg: &TrainConfig, init: EncoderParams) -> Result<(TrainState, EmbeddingMatrix)> {
    train_with(d, cfg, init, |_| {})
}

/// Encoder output for every sample under the current parameters.
pub fn embed_all(state: &TrainState, d: &Dataset) -> Result<EmbeddingMatrix> {
    encoder_forward(&state.params, &d.features)
}
