//! Sentence CNN: word embeddings followed by three convolution + max-pooling
//! stages, producing the question as a short sequence of segment vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv1d, conv1d_backward, embed, embed_backward, maxpool, maxpool_backward, Activation, ConvLayerParams,
    EmbeddingTable, PAD_INDEX,
};
use crate::tensor::Tensor;

pub const STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceEncoderConfig {
    pub max_len: usize,
    pub embed_dim: usize,
    pub feature_maps: [usize; STAGES],
    pub receptive_field: usize,
    pub activation: Activation,
}

impl Default for SentenceEncoderConfig {
    fn default() -> Self {
        SentenceEncoderConfig {
            max_len: 38,
            embed_dim: 50,
            feature_maps: [300, 400, 400],
            receptive_field: 3,
            activation: Activation::Relu,
        }
    }
}

impl SentenceEncoderConfig {
    /// Sequence length after each conv/pool stage, starting from `max_len`.
    /// `None` if some stage would see fewer positions than the receptive field.
    pub fn stage_lengths(&self) -> Option<Vec<usize>> {
        let mut lens = vec![self.max_len];
        let mut len = self.max_len;
        for _ in 0..STAGES {
            if len < self.receptive_field {
                return None;
            }
            len = (len - self.receptive_field + 1).div_ceil(2);
            lens.push(len);
        }
        Some(lens)
    }

    /// Number of question segments the encoder emits.
    pub fn output_positions(&self) -> Option<usize> {
        self.stage_lengths().map(|l| l[STAGES])
    }

    pub fn output_dim(&self) -> usize {
        self.feature_maps[STAGES - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.feature_maps.contains(&0) || self.receptive_field == 0 {
            return Err(Error::arg("sentence encoder dimensions must be positive"));
        }
        match self.output_positions() {
            Some(p) if p >= 2 => Ok(()),
            _ => Err(Error::arg(format!(
                "max_len {} leaves fewer than 2 question segments after {STAGES} conv({})/pool(2) stages",
                self.max_len, self.receptive_field
            ))),
        }
    }
}

/// The question as `P` segment vectors, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionRepresentation {
    pub positions: Tensor,
}

impl QuestionRepresentation {
    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.positions.cols()
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        self.positions.row(i)
    }
}

/// Right-pads with the padding token; rejects empty or over-long questions.
pub fn pad_or_reject(tokens: &[usize], max_len: usize) -> Result<Vec<usize>> {
    if tokens.is_empty() {
        return Err(Error::arg("empty question"));
    }
    if tokens.len() > max_len {
        return Err(Error::QuestionTooLong {
            len: tokens.len(),
            max: max_len,
        });
    }
    let mut padded = Vec::with_capacity(max_len);
    padded.extend_from_slice(tokens);
    padded.resize(max_len, PAD_INDEX);
    Ok(padded)
}

/// Convolution stack of the sentence CNN.
pub type ConvStack = [ConvLayerParams; STAGES];

pub fn check_stack(stack: &ConvStack, config: &SentenceEncoderConfig) -> Result<()> {
    let mut d_in = config.embed_dim;
    for (conv, &maps) in stack.iter().zip(&config.feature_maps) {
        if conv.input_dim() != d_in || conv.feature_maps() != maps || conv.receptive_field != config.receptive_field {
            return Err(Error::dim(
                "sentence conv stack",
                conv.weights.shape(),
                &[maps, config.receptive_field * d_in],
            ));
        }
        d_in = maps;
    }
    Ok(())
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub token_ids: Vec<usize>,
    /// Input to each conv stage (stage 0 is the embedded question).
    stage_inputs: Vec<Tensor>,
    conv_outputs: Vec<Tensor>,
    pool_argmax: Vec<Vec<usize>>,
    pub output: QuestionRepresentation,
}

pub fn encode_question(
    tokens: &[usize],
    table: &EmbeddingTable,
    stack: &ConvStack,
    config: &SentenceEncoderConfig,
) -> Result<QuestionRepresentation> {
    encode_question_traced(tokens, table, stack, config).map(|t| t.output)
}

pub fn encode_question_traced(
    tokens: &[usize],
    table: &EmbeddingTable,
    stack: &ConvStack,
    config: &SentenceEncoderConfig,
) -> Result<EncoderTrace> {
    check_stack(stack, config)?;
    if table.dim() != config.embed_dim {
        return Err(Error::dim("embedding dim", table.vectors.shape(), &[config.embed_dim]));
    }
    let token_ids = pad_or_reject(tokens, config.max_len)?;
    let mut x = embed(&token_ids, table)?;
    let mut stage_inputs = Vec::with_capacity(STAGES);
    let mut conv_outputs = Vec::with_capacity(STAGES);
    let mut pool_argmax = Vec::with_capacity(STAGES);
    for conv in stack {
        let c = conv1d(&x, conv)?;
        let pooled = maxpool(&c)?;
        stage_inputs.push(x);
        conv_outputs.push(c);
        pool_argmax.push(pooled.argmax);
        x = pooled.output;
    }
    Ok(EncoderTrace {
        token_ids,
        stage_inputs,
        conv_outputs,
        pool_argmax,
        output: QuestionRepresentation { positions: x },
    })
}

/// Gradients of the sentence CNN parameters.
#[derive(Debug, Clone)]
pub struct EncoderGrad {
    /// Same shape as the embedding table; the padding row is always zero.
    pub embedding: Tensor,
    pub weights: [Tensor; STAGES],
    pub biases: [Tensor; STAGES],
}

pub fn encode_question_backward(
    trace: &EncoderTrace,
    table: &EmbeddingTable,
    stack: &ConvStack,
    upstream: &Tensor,
) -> Result<EncoderGrad> {
    if upstream.shape() != trace.output.positions.shape() {
        return Err(Error::dim("encoder upstream", upstream.shape(), trace.output.positions.shape()));
    }
    let mut g = upstream.clone();
    let mut weights: Vec<Tensor> = Vec::with_capacity(STAGES);
    let mut biases: Vec<Tensor> = Vec::with_capacity(STAGES);
    for stage in (0..STAGES).rev() {
        let conv_out = &trace.conv_outputs[stage];
        let dc = maxpool_backward(&trace.pool_argmax[stage], conv_out.shape(), &g)?;
        let cg = conv1d_backward(&trace.stage_inputs[stage], &stack[stage], conv_out, &dc)?;
        weights.push(cg.weights);
        biases.push(cg.biases);
        g = cg.input;
    }
    weights.reverse();
    biases.reverse();
    let mut embedding = Tensor::zeros(table.vectors.shape());
    embed_backward(&trace.token_ids, &g, &mut embedding)?;
    // padding row is frozen
    embedding.row_mut(PAD_INDEX).fill(0.0);
    Ok(EncoderGrad {
        embedding,
        weights: weights.try_into().expect("three stages"),
        biases: biases.try_into().expect("three stages"),
    })
}
