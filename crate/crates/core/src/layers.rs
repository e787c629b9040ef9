//! Layer primitives: embedding lookup, 1-D convolution unit, stride-two
//! max-pooling, fully connected mapping, inverted dropout, and the softmax
//! negative log-likelihood head.
//!
//! Every forward function is pure; the matching `*_backward` function takes
//! the forward inputs/outputs plus an upstream gradient and returns gradients
//! for the parameters and the input.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemv, gemv_t_acc, outer_acc, Tensor};

/// Elementwise nonlinearity applied after an affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::arg(format!("unknown activation `{other}`"))),
        }
    }
}

/// Glorot-style uniform matrix on `[-r, r]`, `r = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-r, r);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

// ---------------------------------------------------------------------------
// Embedding

pub const PAD_INDEX: usize = 0;
pub const DEFAULT_EMBEDDING_INIT: f64 = 0.1;

/// One trainable row per question-vocabulary word; row 0 is the padding token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Tensor,
}

impl EmbeddingTable {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::dim("embedding table must be a matrix", vectors.shape(), &[0, 0]));
        }
        Ok(EmbeddingTable { vectors })
    }

    /// Rows uniform on `[-scale, scale]`; the padding row is zero.
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-scale, scale);
        let mut data: Vec<f64> = (0..vocab_size * dim).map(|_| dist.sample(rng)).collect();
        data[..dim].iter_mut().for_each(|v| *v = 0.0);
        EmbeddingTable {
            vectors: Tensor::matrix(vocab_size, dim, data).expect("positive extents"),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

pub fn embed(token_ids: &[usize], table: &EmbeddingTable) -> Result<Tensor> {
    if token_ids.is_empty() {
        return Err(Error::arg("cannot embed an empty token sequence"));
    }
    let dim = table.dim();
    let mut data = Vec::with_capacity(token_ids.len() * dim);
    for (position, &index) in token_ids.iter().enumerate() {
        if index >= table.vocab_size() {
            return Err(Error::Vocabulary {
                position,
                index,
                size: table.vocab_size(),
            });
        }
        data.extend_from_slice(table.vectors.row(index));
    }
    Tensor::matrix(token_ids.len(), dim, data)
}

/// Scatters `upstream` rows into `table_grad` (same shape as the table).
pub fn embed_backward(token_ids: &[usize], upstream: &Tensor, table_grad: &mut Tensor) -> Result<()> {
    if upstream.shape() != [token_ids.len(), table_grad.cols()] {
        return Err(Error::dim("embed upstream", upstream.shape(), &[token_ids.len(), table_grad.cols()]));
    }
    for (pos, &index) in token_ids.iter().enumerate() {
        let g = upstream.row(pos);
        for (t, u) in table_grad.row_mut(index).iter_mut().zip(g) {
            *t += u;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams {
    /// `[feature_maps x receptive_field * input_dim]`, one row per feature map.
    pub weights: Tensor,
    pub biases: Tensor,
    pub receptive_field: usize,
    pub activation: Activation,
}

impl ConvLayerParams {
    pub fn new(weights: Tensor, biases: Tensor, receptive_field: usize, activation: Activation) -> Result<Self> {
        if receptive_field == 0 {
            return Err(Error::arg("receptive field must be positive"));
        }
        if weights.rank() != 2 || weights.cols() % receptive_field != 0 {
            return Err(Error::dim("conv weights vs receptive field", weights.shape(), &[receptive_field]));
        }
        if biases.shape() != [weights.rows()] {
            return Err(Error::dim("conv biases vs weights", biases.shape(), weights.shape()));
        }
        Ok(ConvLayerParams {
            weights,
            biases,
            receptive_field,
            activation,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        feature_maps: usize,
        receptive_field: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        ConvLayerParams {
            weights: glorot_uniform(feature_maps, receptive_field * input_dim, rng),
            biases: Tensor::zeros(&[feature_maps]),
            receptive_field,
            activation,
        }
    }

    pub fn feature_maps(&self) -> usize {
        self.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols() / self.receptive_field
    }
}

/// Valid 1-D convolution with weights shared across positions.
///
/// Row `i` of the output is `act(W · (seq[i] ‖ … ‖ seq[i+s-1]) + b)`. Because
/// the input is row-major, each window is a contiguous slice.
pub fn conv1d(seq: &Tensor, params: &ConvLayerParams) -> Result<Tensor> {
    let (len, d_in) = seq_dims(seq)?;
    let s = params.receptive_field;
    if d_in != params.input_dim() {
        return Err(Error::dim("conv1d input features", seq.shape(), params.weights.shape()));
    }
    if len < s {
        return Err(Error::SequenceTooShort { len, needed: s });
    }
    let positions = len - s + 1;
    let f = params.feature_maps();
    let window = s * d_in;
    let mut out = vec![0.0; positions * f];
    for (i, row) in out.chunks_exact_mut(f).enumerate() {
        let x = &seq.data()[i * d_in..i * d_in + window];
        gemv(params.weights.data(), x, row);
        for (o, b) in row.iter_mut().zip(params.biases.data()) {
            *o = params.activation.apply(*o + b);
        }
    }
    Tensor::matrix(positions, f, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weights: Tensor,
    pub biases: Tensor,
    pub input: Tensor,
}

pub fn conv1d_backward(seq: &Tensor, params: &ConvLayerParams, output: &Tensor, upstream: &Tensor) -> Result<ConvGrad> {
    let (_, d_in) = seq_dims(seq)?;
    if upstream.shape() != output.shape() {
        return Err(Error::dim("conv1d upstream", upstream.shape(), output.shape()));
    }
    let f = params.feature_maps();
    let window = params.receptive_field * d_in;
    let mut dw = Tensor::zeros(params.weights.shape());
    let mut db = Tensor::zeros(params.biases.shape());
    let mut dx = Tensor::zeros(seq.shape());
    let mut dz = vec![0.0; f];
    for i in 0..output.rows() {
        for ((d, y), g) in dz.iter_mut().zip(output.row(i)).zip(upstream.row(i)) {
            *d = g * params.activation.derivative_from_output(*y);
        }
        let x = &seq.data()[i * d_in..i * d_in + window];
        outer_acc(&dz, x, dw.data_mut());
        for (b, d) in db.data_mut().iter_mut().zip(&dz) {
            *b += d;
        }
        gemv_t_acc(params.weights.data(), &dz, &mut dx.data_mut()[i * d_in..i * d_in + window]);
    }
    Ok(ConvGrad {
        weights: dw,
        biases: db,
        input: dx,
    })
}

fn seq_dims(seq: &Tensor) -> Result<(usize, usize)> {
    if seq.rank() != 2 {
        return Err(Error::dim("expected a [length x features] sequence", seq.shape(), &[0, 0]));
    }
    Ok((seq.rows(), seq.cols()))
}

// ---------------------------------------------------------------------------
// Max-pooling

/// Output of [`maxpool`] plus the source row chosen for every output entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Non-overlapping max-pooling over pairs of positions with stride two.
///
/// An odd trailing position is copied through. On ties the earlier position
/// wins, which is also where the gradient is routed.
pub fn maxpool(seq: &Tensor) -> Result<Pooled> {
    let (len, f) = seq_dims(seq)?;
    let out_len = len.div_ceil(2);
    let mut out = Vec::with_capacity(out_len * f);
    let mut argmax = Vec::with_capacity(out_len * f);
    for i in 0..out_len {
        let a = 2 * i;
        let b = a + 1;
        for j in 0..f {
            let va = seq.data()[a * f + j];
            if b < len && seq.data()[b * f + j] > va {
                out.push(seq.data()[b * f + j]);
                argmax.push(b);
            } else {
                out.push(va);
                argmax.push(a);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::matrix(out_len, f, out)?,
        argmax,
    })
}

pub fn maxpool_backward(argmax: &[usize], input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if upstream.len() != argmax.len() || input_shape.len() != 2 {
        return Err(Error::dim("maxpool upstream", upstream.shape(), input_shape));
    }
    let f = input_shape[1];
    let mut dx = Tensor::zeros(input_shape);
    for (k, (&src, g)) in argmax.iter().zip(upstream.data()).enumerate() {
        dx.data_mut()[src * f + k % f] += g;
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseParams {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.rank() != 2 || bias.shape() != [weights.rows()] {
            return Err(Error::dim("dense bias vs weights", bias.shape(), weights.shape()));
        }
        Ok(DenseParams {
            weights,
            bias,
            activation,
        })
    }

    pub fn init<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, activation: Activation, rng: &mut R) -> Self {
        DenseParams {
            weights: glorot_uniform(output_dim, input_dim, rng),
            bias: Tensor::zeros(&[output_dim]),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

pub fn dense(x: &Tensor, params: &DenseParams) -> Result<Tensor> {
    if x.rank() != 1 || x.len() != params.input_dim() {
        return Err(Error::dim("dense input", x.shape(), params.weights.shape()));
    }
    let mut out = vec![0.0; params.output_dim()];
    gemv(params.weights.data(), x.data(), &mut out);
    for (o, b) in out.iter_mut().zip(params.bias.data()) {
        *o = params.activation.apply(*o + b);
    }
    Ok(Tensor::vector(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

pub fn dense_backward(x: &Tensor, params: &DenseParams, output: &Tensor, upstream: &Tensor) -> Result<DenseGrad> {
    if upstream.shape() != output.shape() || output.len() != params.output_dim() {
        return Err(Error::dim("dense upstream", upstream.shape(), output.shape()));
    }
    let dz: Vec<f64> = upstream
        .data()
        .iter()
        .zip(output.data())
        .map(|(g, y)| g * params.activation.derivative_from_output(*y))
        .collect();
    let mut dw = Tensor::zeros(params.weights.shape());
    let mut dx = Tensor::zeros(x.shape());
    outer_acc(&dz, x.data(), dw.data_mut());
    gemv_t_acc(params.weights.data(), &dz, dx.data_mut());
    Ok(DenseGrad {
        weights: dw,
        bias: Tensor::vector(dz),
        input: dx,
    })
}

// ---------------------------------------------------------------------------
// Dropout

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Dropout result. `mask` holds the per-entry multiplier (0 or `1/(1-p)`)
/// and is `None` when the input passed through untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropped {
    pub output: Tensor,
    pub mask: Option<Vec<f64>>,
}

/// Inverted dropout: in training each entry is zeroed with probability `p`
/// and survivors are scaled by `1/(1-p)`; evaluation is the identity.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, phase: Phase, rng: &mut R) -> Result<Dropped> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::arg(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if phase == Phase::Eval || p == 0.0 {
        return Ok(Dropped {
            output: x.clone(),
            mask: None,
        });
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mut out = x.clone();
    for (o, m) in out.data_mut().iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok(Dropped {
        output: out,
        mask: Some(mask),
    })
}

pub fn dropout_backward(mask: Option<&[f64]>, upstream: &Tensor) -> Tensor {
    let mut g = upstream.clone();
    if let Some(mask) = mask {
        for (v, m) in g.data_mut().iter_mut().zip(mask) {
            *v *= m;
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Softmax + negative log-likelihood

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxNll {
    pub probs: Tensor,
    pub loss: f64,
    pub target: usize,
}

impl SoftmaxNll {
    /// Gradient of the loss w.r.t. the logits: `probs - one_hot(target)`.
    pub fn logits_grad(&self) -> Tensor {
        let mut g = self.probs.clone();
        g.data_mut()[self.target] -= 1.0;
        g
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter_mut().for_each(|e| *e /= sum);
    exps
}

pub fn softmax_nll(logits: &Tensor, target: usize) -> Result<SoftmaxNll> {
    let k = logits.len();
    if logits.rank() != 1 || k < 2 {
        return Err(Error::arg(format!("softmax needs at least two classes, got shape {:?}", logits.shape())));
    }
    if target >= k {
        return Err(Error::arg(format!("target class {target} out of range for {k} classes")));
    }
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.data().iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = -(logits.data()[target] - max - log_sum);
    Ok(SoftmaxNll {
        probs: Tensor::vector(softmax(logits.data())),
        loss,
        target,
    })
}
