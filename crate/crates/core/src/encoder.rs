//! Trainable embedding refiner.
//!
//! Each block is a residual position-wise feedforward map,
//! `x <- x + W2 tanh(W1 x + b1) + b2`, which is what a transformer encoder
//! block reduces to when every sample is a single token. Output is not
//! normalized; cosine similarity takes care of scale downstream.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// `hidden x input`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `input x hidden`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Block {
    fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden_dim, input_dim)),
            b1: Array1::zeros(hidden_dim),
            w2: Array2::zeros((input_dim, hidden_dim)),
            b2: Array1::zeros(input_dim),
        }
    }

    fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Encoder weights. Parameters are ordered block by block, and within a
/// block as `w1, b1, w2, b2`, each row-major. Both the checkpoint format and
/// [`EncoderParams::to_flat`] use that order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    input_dim: usize,
    hidden_dim: usize,
    blocks: Vec<Block>,
}

/// Gradients shaped exactly like the owning [`EncoderParams`].
pub type EncoderGradients = EncoderParams;

impl EncoderParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, n_blocks: usize) -> Result<Self> {
        check_dims(input_dim, hidden_dim, n_blocks)?;
        Ok(Self {
            input_dim,
            hidden_dim,
            blocks: (0..n_blocks).map(|_| Block::zeros(input_dim, hidden_dim)).collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(Block::n_params).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for b in &self.blocks {
            for t in b.tensors() {
                out.extend_from_slice(t);
            }
        }
        out
    }

    /// Overwrite all parameters from a flat vector in declaration order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for b in &mut self.blocks {
            for t in b.tensors_mut() {
                t.copy_from_slice(&flat[at..at + t.len()]);
                at += t.len();
            }
        }
        Ok(())
    }

    /// Apply `f(param, other)` elementwise over two congruent parameter sets.
    pub fn zip_apply(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) {
        assert_eq!(self.n_params(), other.n_params(), "parameter shapes differ");
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (ta, tb) in a.tensors_mut().into_iter().zip(b.tensors()) {
                for (x, &y) in ta.iter_mut().zip(tb) {
                    f(x, y);
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())))
    }
}

fn check_dims(input_dim: usize, hidden_dim: usize, n_blocks: usize) -> Result<()> {
    if input_dim == 0 || hidden_dim == 0 || n_blocks == 0 {
        return Err(Error::InvalidArgument(format!(
            "encoder dims must be >= 1 (input {input_dim}, hidden {hidden_dim}, blocks {n_blocks})"
        )));
    }
    Ok(())
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn encoder_init(input_dim: usize, hidden_dim: usize, n_blocks: usize, seed: u64) -> Result<EncoderParams> {
    let mut p = EncoderParams::zeros(input_dim, hidden_dim, n_blocks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound1 = 1.0 / (input_dim as f64).sqrt();
    let bound2 = 1.0 / (hidden_dim as f64).sqrt();
    for b in &mut p.blocks {
        b.w1.mapv_inplace(|_| rng.random_range(-bound1..=bound1));
        b.w2.mapv_inplace(|_| rng.random_range(-bound2..=bound2));
    }
    Ok(p)
}

struct Trace {
    /// Input to each block.
    inputs: Vec<Array2<f64>>,
    /// `tanh(W1 x + b1)` for each block.
    hidden: Vec<Array2<f64>>,
    output: Array2<f64>,
}

fn check_input(p: &EncoderParams, h: &EmbeddingMatrix) -> Result<()> {
    if h.dim() != p.input_dim {
        return Err(Error::Shape(format!(
            "encoder expects dim {}, got {}",
            p.input_dim,
            h.dim()
        )));
    }
    Ok(())
}

fn forward_trace(p: &EncoderParams, h: &EmbeddingMatrix) -> Trace {
    let mut x = h.as_array().clone();
    let mut inputs = Vec::with_capacity(p.blocks.len());
    let mut hidden = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let a = (x.dot(&b.w1.t()) + &b.b1).mapv_into(f64::tanh);
        let next = &x + &a.dot(&b.w2.t()) + &b.b2;
        inputs.push(std::mem::replace(&mut x, next));
        hidden.push(a);
    }
    Trace {
        inputs,
        hidden,
        output: x,
    }
}

pub fn encoder_forward(p: &EncoderParams, h: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(encoder_forward_raw(p, h)?)
}

/// Forward pass without the finiteness check on the output.
pub(crate) fn encoder_forward_raw(p: &EncoderParams, h: &EmbeddingMatrix) -> Result<Array2<f64>> {
    check_input(p, h)?;
    Ok(forward_trace(p, h).output)
}

/// Gradient of `<grad_z, encoder_forward(p, h)>` with respect to every
/// parameter.
pub fn encoder_backward(p: &EncoderParams, h: &EmbeddingMatrix, grad_z: &EmbeddingMatrix) -> Result<EncoderGradients> {
    check_input(p, h)?;
    if grad_z.n_samples() != h.n_samples() || grad_z.dim() != h.dim() {
        return Err(Error::Shape(format!(
            "grad_z is {}x{}, forward output is {}x{}",
            grad_z.n_samples(),
            grad_z.dim(),
            h.n_samples(),
            h.dim()
        )));
    }
    let trace = forward_trace(p, h);
    let mut grads = EncoderParams::zeros(p.input_dim, p.hidden_dim, p.blocks.len())?;
    let mut g = grad_z.as_array().clone();
    for (k, b) in p.blocks.iter().enumerate().rev() {
        let a = &trace.hidden[k];
        let gb = &mut grads.blocks[k];
        gb.w2 = g.t().dot(a);
        gb.b2 = g.sum_axis(Axis(0));
        let du = g.dot(&b.w2) * &a.mapv(|v| 1.0 - v * v);
        gb.w1 = du.t().dot(&trace.inputs[k]);
        gb.b1 = du.sum_axis(Axis(0));
        g += &du.dot(&b.w1);
    }
    Ok(grads)
}

/// Relative error between an analytic and a numerical derivative.
///
/// The denominator is floored at `1e-2` so derivatives that are
/// analytically zero compare by absolute difference instead of dividing
/// roundoff by roundoff.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Finite-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compare analytic parameter gradients against central differences of
/// `loss_fn(encoder_forward(p, h))`; returns the worst relative error.
///
/// `loss_fn` returns the scalar loss and its gradient with respect to the
/// encoder output.
pub fn gradient_check<F>(p: &EncoderParams, h: &EmbeddingMatrix, loss_fn: F) -> Result<f64>
where
    F: Fn(&EmbeddingMatrix) -> Result<(f64, EmbeddingMatrix)>,
{
    let z = encoder_forward(p, h)?;
    let (_, grad_z) = loss_fn(&z)?;
    let analytic = encoder_backward(p, h, &grad_z)?.to_flat();

    let base = p.to_flat();
    let mut probe = p.clone();
    let mut flat = base.clone();
    let mut eval = |flat: &[f64]| -> Result<f64> {
        probe.set_flat(flat)?;
        Ok(loss_fn(&encoder_forward(&probe, h)?)?.0)
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        flat[i] = base[i] + FD_STEP;
        let up = eval(&flat)?;
        flat[i] = base[i] - FD_STEP;
        let down = eval(&flat)?;
        flat[i] = base[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingMatrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn quadratic(z: &EmbeddingMatrix) -> Result<(f64, EmbeddingMatrix)> {
        let v = z.as_array().iter().map(|x| x * x).sum();
        Ok((v, EmbeddingMatrix::new(z.as_array() * 2.0)?))
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = encoder_init(4, 8, 1, 7).unwrap();
        assert_eq!(a, encoder_init(4, 8, 1, 7).unwrap());
        assert_ne!(a, encoder_init(4, 8, 1, 8).unwrap());

        let p = encoder_init(64, 256, 2, 99).unwrap();
        for b in p.blocks() {
            assert!(b.w1.iter().all(|w| w.abs() <= 1.0 / 8.0));
            assert!(b.w2.iter().all(|w| w.abs() <= 1.0 / 16.0));
            assert!(b.b1.iter().chain(b.b2.iter()).all(|&v| v == 0.0));
        }
        assert!(encoder_init(0, 8, 1, 0).is_err());
        assert!(encoder_init(4, 8, 0, 0).is_err());
    }

    #[test]
    fn zero_params_are_identity() {
        let p = EncoderParams::zeros(3, 5, 2).unwrap();
        let h = random_matrix(4, 3, 1);
        assert_eq!(encoder_forward(&p, &h).unwrap(), h);
    }

    #[test]
    fn hand_computed_single_block() {
        let mut p = EncoderParams::zeros(2, 2, 1).unwrap();
        let b = &mut p.blocks_mut()[0];
        b.w1 = array![[1.0, 2.0], [0.5, -1.0]];
        b.b1 = array![0.1, 0.0];
        b.w2 = array![[1.0, 0.0], [2.0, -1.0]];
        b.b2 = array![0.0, 0.5];
        let h = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let z = encoder_forward(&p, &h).unwrap();
        // W1 x + b1 = [1.1, 0.5]
        let (t0, t1) = (1.1f64.tanh(), 0.5f64.tanh());
        let want = [1.0 + t0, 0.0 + 2.0 * t0 - t1 + 0.5];
        assert!((z.row(0)[0] - want[0]).abs() < 1e-15);
        assert!((z.row(0)[1] - want[1]).abs() < 1e-15);
    }

    #[test]
    fn rows_are_independent() {
        let p = encoder_init(3, 4, 2, 2).unwrap();
        let h = random_matrix(3, 3, 4);
        let z = encoder_forward(&p, &h).unwrap();
        for i in 0..3 {
            let zi = encoder_forward(&p, &h.select_rows(&[i])).unwrap();
            for k in 0..3 {
                assert!((zi.row(0)[k] - z.row(i)[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dim_mismatch_is_error() {
        let p = encoder_init(3, 4, 1, 0).unwrap();
        assert!(encoder_forward(&p, &random_matrix(2, 4, 0)).is_err());
        let h = random_matrix(2, 3, 0);
        assert!(encoder_backward(&p, &h, &random_matrix(3, 3, 0)).is_err());
    }

    #[test]
    fn zero_upstream_gradient() {
        let p = encoder_init(3, 4, 2, 1).unwrap();
        let h = random_matrix(5, 3, 2);
        let g = EmbeddingMatrix::from_vec(5, 3, vec![0.0; 15]).unwrap();
        assert!(encoder_backward(&p, &h, &g).unwrap().to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (blocks, seed) in [(1, 10), (2, 11)] {
            let mut p = encoder_init(3, 4, blocks, seed).unwrap();
            // nonzero biases so every path is exercised
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for b in p.blocks_mut() {
                b.b1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                b.b2.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
            let h = random_matrix(5, 3, seed);
            let err = gradient_check(&p, &h, quadratic).unwrap();
            assert!(err < 1e-6, "blocks={blocks} err={err}");
        }
    }

    #[test]
    fn constant_loss_on_zero_encoder() {
        let p = EncoderParams::zeros(2, 3, 1).unwrap();
        let h = random_matrix(3, 2, 0);
        let err = gradient_check(&p, &h, |z| {
            Ok((1.0, EmbeddingMatrix::from_vec(z.n_samples(), z.dim(), vec![0.0; z.n_samples() * z.dim()])?))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn flat_round_trip() {
        let p = encoder_init(3, 4, 2, 5).unwrap();
        let mut q = EncoderParams::zeros(3, 4, 2).unwrap();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&[0.0]).is_err());
    }
}
