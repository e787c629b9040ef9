//! The full answer classifier `p(a | q, I; θ)`.
//!
//! Forward pass, per mode:
//!
//! - `Full`: sentence CNN → image mapping → multimodal convolution → dropout → softmax
//! - `Concat`: sentence CNN pooled over positions, concatenated with the mapped image
//! - `Language`: pooled sentence CNN output only; the image is never read
//!
//! Backward passes are composed explicitly from the per-layer transforms; the
//! topology is fixed, so there is no tape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_backward, fuse_concat_ablation, fuse_traced, pool_question, pool_question_backward, FusionTrace, MultimodalConvParams};
use crate::image::{map_image, map_image_backward, ImageFeatureStore, DEFAULT_FEATURE_DIM};
use crate::layers::{
    dense, dense_backward, dropout, dropout_backward, softmax_nll, Activation, ConvLayerParams, DenseParams, Dropped,
    EmbeddingTable, Phase, DEFAULT_EMBEDDING_INIT, PAD_INDEX,
};
use crate::sentence::{encode_question_backward, encode_question_traced, ConvStack, EncoderTrace, SentenceEncoderConfig};
use crate::tensor::{read_u32, Tensor};

/// Which network variant to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Multimodal convolution fusion.
    #[default]
    Full,
    /// Question and image vectors concatenated straight into the classifier.
    Concat,
    /// Question only.
    Language,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::Concat, Mode::Language];

    pub fn uses_image(self) -> bool {
        self != Mode::Language
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Concat => "concat",
            Mode::Language => "language",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Mode::Full),
            "concat" | "concat-ablation" => Ok(Mode::Concat),
            "language" | "language-only" => Ok(Mode::Language),
            other => Err(Error::arg(format!("unknown mode `{other}` (full|concat|language)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sentence: SentenceEncoderConfig,
    /// Question vocabulary size, including the padding and unknown tokens.
    pub vocab_size: usize,
    /// Dimension of the mapped image and of each question segment.
    pub joint_dim: usize,
    pub multimodal_maps: usize,
    pub feature_dim: usize,
    pub answer_count: usize,
    pub dropout: f64,
    /// Half-width of the uniform embedding initialization.
    #[serde(default = "default_embedding_init")]
    pub embedding_init: f64,
    pub mode: Mode,
    /// Nonlinearity of the image mapping and the multimodal unit.
    pub activation: Activation,
    pub seed: u64,
}

fn default_embedding_init() -> f64 {
    DEFAULT_EMBEDDING_INIT
}

impl ModelConfig {
    /// 38-token questions, 50-d embeddings, 300/400/400 feature maps, 400-d
    /// joint space, 400 multimodal maps, 4096-d image features, dropout 0.1.
    pub fn full_scale(vocab_size: usize, answer_count: usize) -> Self {
        ModelConfig {
            sentence: SentenceEncoderConfig::default(),
            vocab_size,
            joint_dim: 400,
            multimodal_maps: 400,
            feature_dim: DEFAULT_FEATURE_DIM,
            answer_count,
            dropout: 0.1,
            embedding_init: DEFAULT_EMBEDDING_INIT,
            mode: Mode::Full,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    /// Smallest useful network, sized for finite-difference checks.
    pub fn tiny(mode: Mode) -> Self {
        ModelConfig {
            sentence: SentenceEncoderConfig {
                max_len: 24,
                embed_dim: 4,
                feature_maps: [6, 6, 6],
                receptive_field: 3,
                activation: Activation::Relu,
            },
            vocab_size: 12,
            joint_dim: 6,
            multimodal_maps: 6,
            feature_dim: 8,
            answer_count: 3,
            dropout: 0.0,
            embedding_init: DEFAULT_EMBEDDING_INIT,
            mode,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sentence.validate()?;
        if self.vocab_size < 2 {
            return Err(Error::arg("vocabulary must hold at least the padding and unknown tokens"));
        }
        if self.answer_count < 2 {
            return Err(Error::arg(format!("need at least 2 answer classes, got {}", self.answer_count)));
        }
        if !(self.embedding_init >= 0.0 && self.embedding_init.is_finite()) {
            return Err(Error::arg(format!("embedding init scale must be finite and non-negative, got {}", self.embedding_init)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.joint_dim != self.sentence.output_dim() {
            return Err(Error::arg(format!(
                "joint dim {} must equal the last sentence feature-map count {}",
                self.joint_dim,
                self.sentence.output_dim()
            )));
        }
        if self.joint_dim == 0 || self.multimodal_maps == 0 || self.feature_dim == 0 {
            return Err(Error::arg("dimensions must be positive"));
        }
        Ok(())
    }

    /// Input width of the softmax classifier.
    pub fn classifier_input_dim(&self) -> usize {
        match self.mode {
            Mode::Full => self.multimodal_maps,
            Mode::Concat => 2 * self.joint_dim,
            Mode::Language => self.joint_dim,
        }
    }
}

/// Every trainable parameter. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: EmbeddingTable,
    pub sentence: ConvStack,
    /// Present in `Full` and `Concat` modes.
    pub image: Option<DenseParams>,
    /// Present in `Full` mode.
    pub fusion: Option<MultimodalConvParams>,
    pub classifier: DenseParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sc = &config.sentence;
        let embedding = EmbeddingTable::init(config.vocab_size, sc.embed_dim, config.embedding_init, &mut rng);
        let mut d_in = sc.embed_dim;
        let mut convs = Vec::with_capacity(3);
        for &maps in &sc.feature_maps {
            convs.push(ConvLayerParams::init(d_in, maps, sc.receptive_field, sc.activation, &mut rng));
            d_in = maps;
        }
        let image = config
            .mode
            .uses_image()
            .then(|| DenseParams::init(config.feature_dim, config.joint_dim, config.activation, &mut rng));
        let fusion = (config.mode == Mode::Full)
            .then(|| MultimodalConvParams::init(config.joint_dim, config.multimodal_maps, config.activation, &mut rng));
        let classifier = DenseParams::init(config.classifier_input_dim(), config.answer_count, Activation::Identity, &mut rng);
        Ok(ModelParams {
            embedding,
            sentence: convs.try_into().expect("three stages"),
            image,
            fusion,
            classifier,
        })
    }

    /// Same structure with every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_group_mut(|_, t| t.fill(0.0));
        z
    }

    /// Parameter groups in canonical order.
    pub fn groups(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding.vectors)];
        for (i, c) in self.sentence.iter().enumerate() {
            out.push((format!("sentence.{i}.weights"), &c.weights));
            out.push((format!("sentence.{i}.biases"), &c.biases));
        }
        if let Some(im) = &self.image {
            out.push(("image.weights".into(), &im.weights));
            out.push(("image.bias".into(), &im.bias));
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion.weights".into(), &f.weights));
            out.push(("fusion.biases".into(), &f.biases));
        }
        out.push(("classifier.weights".into(), &self.classifier.weights));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    fn for_each_group_mut(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        let mut k = 0;
        let mut visit = |t: &mut Tensor| {
            f(k, t);
            k += 1;
        };
        visit(&mut self.embedding.vectors);
        for c in self.sentence.iter_mut() {
            visit(&mut c.weights);
            visit(&mut c.biases);
        }
        if let Some(im) = &mut self.image {
            visit(&mut im.weights);
            visit(&mut im.bias);
        }
        if let Some(fu) = &mut self.fusion {
            visit(&mut fu.weights);
            visit(&mut fu.biases);
        }
        visit(&mut self.classifier.weights);
        visit(&mut self.classifier.bias);
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for (_, t) in self.groups() {
            v.extend_from_slice(t.data());
        }
        v
    }

    /// Overwrites every parameter from a flat vector in canonical order.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::dim("flattened parameters", &[flat.len()], &[n]));
        }
        let mut at = 0;
        self.for_each_group_mut(|_, t| {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + len]);
            at += len;
        });
        Ok(())
    }

    /// Flat index ranges of coordinates that never train (the padding row).
    pub fn frozen_range(&self) -> std::ops::Range<usize> {
        let d = self.embedding.dim();
        PAD_INDEX * d..(PAD_INDEX + 1) * d
    }

    /// Name of the group owning flat coordinate `index` and the offset inside it.
    pub fn locate(&self, mut index: usize) -> Option<(String, usize)> {
        for (name, t) in self.groups() {
            if index < t.len() {
                return Some((name, index));
            }
            index -= t.len();
        }
        None
    }

    fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = ModelParams::init(config)?;
        let got: Vec<_> = self.groups().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let want: Vec<_> = expected.groups().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if got != want {
            return Err(Error::Checkpoint(format!("parameter shapes {got:?} do not match config {want:?}")));
        }
        Ok(())
    }
}

/// One supervised sample as the model sees it.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub tokens: &'a [usize],
    pub image: Option<&'a [f64]>,
    pub target: usize,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    encoder: EncoderTrace,
    image: Option<(Tensor, Tensor)>,
    fusion: Option<FusionTrace>,
    question_argmax: Option<Vec<usize>>,
    joint: Tensor,
    dropped: Dropped,
    logits: Tensor,
}

impl ForwardTrace {
    /// Classifier input before dropout.
    pub fn joint(&self) -> &Tensor {
        &self.joint
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub probs: Tensor,
    pub trace: ForwardTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Test hook: drops the target term from the softmax gradient so the
    /// gradient checker has something to catch.
    #[doc(hidden)]
    pub corrupt_backward: bool,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Model {
            config,
            params,
            corrupt_backward: false,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Model {
            config,
            params,
            corrupt_backward: false,
        })
    }

    pub fn forward<R: Rng + ?Sized>(&self, tokens: &[usize], image: Option<&[f64]>, phase: Phase, rng: &mut R) -> Result<Forward> {
        let p = &self.params;
        let encoder = encode_question_traced(tokens, &p.embedding, &p.sentence, &self.config.sentence)?;
        let qt = &encoder.output;

        let mut image_trace = None;
        let mut fusion = None;
        let mut question_argmax = None;
        let joint = match self.config.mode {
            Mode::Language => {
                let (pooled, argmax) = pool_question(qt);
                question_argmax = Some(argmax);
                pooled
            }
            mode => {
                let feature = image.ok_or_else(|| Error::arg("image feature required in this mode"))?;
                let feature = Tensor::vector(feature.to_vec());
                let mapped = map_image(&feature, p.image.as_ref().expect("image params in image modes"))?;
                let joint = if mode == Mode::Full {
                    let t = fuse_traced(qt, &mapped, p.fusion.as_ref().expect("fusion params in full mode"))?;
                    let out = t.output.clone();
                    fusion = Some(t);
                    out
                } else {
                    question_argmax = Some(pool_question(qt).1);
                    fuse_concat_ablation(qt, &mapped)?
                };
                image_trace = Some((feature, mapped));
                joint
            }
        };
        let dropped = dropout(&joint, self.config.dropout, phase, rng)?;
        let logits = dense(&dropped.output, &p.classifier)?;
        let probs = crate::layers::softmax(logits.data());
        Ok(Forward {
            probs: Tensor::vector(probs),
            trace: ForwardTrace {
                encoder,
                image: image_trace,
                fusion,
                question_argmax,
                joint,
                dropped,
                logits,
            },
        })
    }

    /// Forward pass resolving the image through a feature store.
    pub fn forward_with_store<R: Rng + ?Sized>(
        &self,
        tokens: &[usize],
        image_id: &str,
        store: &ImageFeatureStore,
        phase: Phase,
        rng: &mut R,
    ) -> Result<Forward> {
        let image = if self.config.mode.uses_image() {
            Some(store.require(image_id)?)
        } else {
            None
        };
        self.forward(tokens, image, phase, rng)
    }

    /// Class probabilities in evaluation mode.
    pub fn probabilities(&self, tokens: &[usize], image: Option<&[f64]>) -> Result<Tensor> {
        // evaluation never draws from the stream
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(tokens, image, Phase::Eval, &mut rng)?.probs)
    }

    /// Most probable answer class; ties go to the lowest index.
    pub fn predict(&self, tokens: &[usize], image: Option<&[f64]>) -> Result<usize> {
        Ok(argmax(self.probabilities(tokens, image)?.data()))
    }

    /// Loss and parameter gradient (as a `ModelParams`) for one sample.
    pub fn sample_gradient<R: Rng + ?Sized>(&self, example: &Example<'_>, phase: Phase, rng: &mut R) -> Result<(f64, ModelParams)> {
        let fwd = self.forward(example.tokens, example.image, phase, rng)?;
        let nll = softmax_nll(&fwd.trace.logits, example.target)?;
        let grads = self.backward(&fwd.trace, &nll.probs, example.target)?;
        Ok((nll.loss, grads))
    }

    fn backward(&self, trace: &ForwardTrace, probs: &Tensor, target: usize) -> Result<ModelParams> {
        let p = &self.params;
        let mut dlogits = probs.clone();
        if !self.corrupt_backward {
            dlogits.data_mut()[target] -= 1.0;
        }
        let cls = dense_backward(&trace.dropped.output, &p.classifier, &trace.logits, &dlogits)?;
        let djoint = dropout_backward(trace.dropped.mask.as_deref(), &cls.input);

        let mut grads = p.zeros_like();
        grads.classifier.weights = cls.weights;
        grads.classifier.bias = cls.bias;

        let qt = &trace.encoder.output;
        let dq = match self.config.mode {
            Mode::Language => {
                pool_question_backward(trace.question_argmax.as_ref().unwrap(), qt.positions.shape(), djoint.data())
            }
            Mode::Concat => {
                let d = self.config.joint_dim;
                let dq = pool_question_backward(trace.question_argmax.as_ref().unwrap(), qt.positions.shape(), &djoint.data()[..d]);
                let dim = Tensor::vector(djoint.data()[d..].to_vec());
                self.image_backward(trace, &dim, &mut grads)?;
                dq
            }
            Mode::Full => {
                let (_, mapped) = trace.image.as_ref().unwrap();
                let fusion = p.fusion.as_ref().unwrap();
                let fg = fuse_backward(trace.fusion.as_ref().unwrap(), qt, mapped, fusion, &djoint)?;
                let gf = grads.fusion.as_mut().unwrap();
                gf.weights = fg.weights;
                gf.biases = fg.biases;
                self.image_backward(trace, &fg.image, &mut grads)?;
                fg.question
            }
        };

        let eg = encode_question_backward(&trace.encoder, &p.embedding, &p.sentence, &dq)?;
        grads.embedding.vectors = eg.embedding;
        for (s, (w, b)) in eg.weights.into_iter().zip(eg.biases).enumerate() {
            grads.sentence[s].weights = w;
            grads.sentence[s].biases = b;
        }
        Ok(grads)
    }

    fn image_backward(&self, trace: &ForwardTrace, dim: &Tensor, grads: &mut ModelParams) -> Result<()> {
        let (feature, mapped) = trace.image.as_ref().unwrap();
        let (dw, db) = map_image_backward(feature, self.params.image.as_ref().unwrap(), mapped, dim)?;
        let gi = grads.image.as_mut().unwrap();
        gi.weights = dw;
        gi.bias = db;
        Ok(())
    }

    /// Mean negative log-likelihood over a batch and the mean gradient in
    /// flattened parameter order.
    ///
    /// One dropout seed per sample is drawn from `rng` in batch order; the
    /// per-sample gradients are then evaluated in parallel and summed with a
    /// fixed pairwise tree, so the result does not depend on thread count.
    pub fn loss_and_gradients<R: Rng + ?Sized>(&self, batch: &[Example<'_>], rng: &mut R) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        for ex in batch {
            if ex.target >= self.config.answer_count {
                return Err(Error::arg(format!(
                    "target class {} out of range for {} classes",
                    ex.target, self.config.answer_count
                )));
            }
        }
        let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
        let (loss, mut grad) = self.tree_sum(batch, &seeds)?;
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    fn tree_sum(&self, batch: &[Example<'_>], seeds: &[u64]) -> Result<(f64, Vec<f64>)> {
        if batch.len() == 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds[0]);
            let (loss, g) = self.sample_gradient(&batch[0], Phase::Train, &mut rng)?;
            return Ok((loss, g.flatten()));
        }
        let mid = batch.len() / 2;
        let (left, right) = rayon::join(
            || self.tree_sum(&batch[..mid], &seeds[..mid]),
            || self.tree_sum(&batch[mid..], &seeds[mid..]),
        );
        let (ll, mut lg) = left?;
        let (rl, rg) = right?;
        for (a, b) in lg.iter_mut().zip(&rg) {
            *a += b;
        }
        Ok((ll + rl, lg))
    }

    /// Mean loss only, evaluation phase.
    pub fn mean_loss(&self, batch: &[Example<'_>]) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = 0.0;
        for ex in batch {
            let fwd = self.forward(ex.tokens, ex.image, Phase::Eval, &mut rng)?;
            total += softmax_nll(&fwd.trace.logits, ex.target)?.loss;
        }
        Ok(total / batch.len() as f64)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"QACK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON header stored at the front of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// Question vocabulary in index order.
    pub question_vocab: Vec<String>,
    /// Answer classes in index order.
    pub answers: Vec<String>,
}

/// Layout: magic `QACK`, format version (u32), header length (u32), JSON
/// header, tensor count (u32), then the parameter tensors in canonical order.
pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model, question_vocab: &[String], answers: &[String]) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        question_vocab: question_vocab.to_vec(),
        answers: answers.to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let groups = model.params.groups();
    w.write_all(&(groups.len() as u32).to_le_bytes())?;
    for (_, t) in groups {
        t.write_to(w)?;
    }
    Ok(())
}

/// Reads a checkpoint. With `expected`, any difference from the stored
/// configuration is an error.
pub fn read_checkpoint<R: Read>(r: &mut R, expected: Option<&ModelConfig>) -> Result<(Model, CheckpointHeader)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if let Some(exp) = expected {
        if exp != &header.config {
            return Err(Error::Checkpoint("stored model config differs from the expected one".into()));
        }
    }
    if header.config.vocab_size != header.question_vocab.len() || header.config.answer_count != header.answers.len() {
        return Err(Error::Checkpoint("vocabulary sizes disagree with the stored config".into()));
    }
    let mut params = ModelParams::init(&header.config)?;
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(Tensor::read_from(r)?);
    }
    let expected_shapes: Vec<Vec<usize>> = params.groups().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let got_shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
    if expected_shapes != got_shapes {
        return Err(Error::Checkpoint(format!("tensor shapes {got_shapes:?} do not match config {expected_shapes:?}")));
    }
    params.for_each_group_mut(|k, t| *t = tensors[k].clone());
    let model = Model::from_parts(header.config.clone(), params)?;
    Ok((model, header))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, question_vocab: &[String], answers: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, question_vocab, answers)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<(Model, CheckpointHeader)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?), expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn random_example(rng: &mut ChaCha8Rng, config: &ModelConfig) -> (Vec<usize>, Vec<f64>, usize) {
        let len = rng.gen_range(1..=config.sentence.max_len);
        let tokens = (0..len).map(|_| rng.gen_range(1..config.vocab_size)).collect();
        let feature = (0..config.feature_dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        (tokens, feature, rng.gen_range(0..config.answer_count))
    }

    fn zero_model(mode: Mode, k: usize) -> Model {
        let mut config = ModelConfig::tiny(mode);
        config.answer_count = k;
        let mut m = Model::new(config).unwrap();
        let n = m.params.num_params();
        m.params.unflatten(&vec![0.0; n]).unwrap();
        m
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        for mode in Mode::ALL {
            let m = zero_model(mode, 5);
            let probs = m.probabilities(&[1, 2, 3], Some(&[0.5; 8])).unwrap();
            assert_eq!(probs.data(), &[0.2; 5]);
            assert_eq!(m.predict(&[1, 2, 3], Some(&[0.5; 8])).unwrap(), 0);
        }
    }

    #[test]
    fn zero_params_loss_is_log_k() {
        let m = zero_model(Mode::Full, 4);
        let feat = [0.1; 8];
        let toks = [1usize, 5, 7];
        let batch = [
            Example { tokens: &toks, image: Some(&feat), target: 0 },
            Example { tokens: &toks[..1], image: Some(&feat), target: 3 },
        ];
        let (loss, _) = m.loss_and_gradients(&batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn full_scale_config_shapes() {
        let config = ModelConfig::full_scale(20, 10);
        config.validate().unwrap();
        let p = ModelParams::init(&config).unwrap();
        let shapes: Vec<(String, Vec<usize>)> = p.groups().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        assert_eq!(shapes[0].1, vec![20, 50]);
        assert_eq!(shapes[1].1, vec![300, 150]);
        assert_eq!(shapes[3].1, vec![400, 900]);
        assert_eq!(shapes[5].1, vec![400, 1200]);
        assert_eq!(shapes[7], ("image.weights".to_string(), vec![400, 4096]));
        assert_eq!(shapes[9], ("fusion.weights".to_string(), vec![400, 1200]));
        assert_eq!(shapes[11], ("classifier.weights".to_string(), vec![10, 400]));
    }

    #[test]
    fn forward_is_deterministic_and_dropout_seeded() {
        let mut config = ModelConfig::tiny(Mode::Full);
        config.dropout = 0.3;
        let m = Model::new(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (toks, feat, _) = random_example(&mut rng, &config);
        let a = m.forward(&toks, Some(&feat), Phase::Train, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = m.forward(&toks, Some(&feat), Phase::Train, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        for mode in Mode::ALL {
            let config = ModelConfig::tiny(mode);
            let m = Model::new(config.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..5 {
                let (toks, feat, _) = random_example(&mut rng, &config);
                let t = m.forward(&toks, Some(&feat), Phase::Train, &mut rng).unwrap().probs;
                let e = m.forward(&toks, Some(&feat), Phase::Eval, &mut rng).unwrap().probs;
                assert!(t.data().iter().zip(e.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn full_and_language_differ_when_image_weights_nonzero() {
        for seed in 0..5 {
            let mut full_cfg = ModelConfig::tiny(Mode::Full);
            full_cfg.seed = seed;
            let full = Model::new(full_cfg.clone()).unwrap();
            let lang = Model::new(ModelConfig { mode: Mode::Language, ..full_cfg.clone() }).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (toks, feat, _) = random_example(&mut rng, &full_cfg);
            assert_ne!(full.probabilities(&toks, Some(&feat)).unwrap(), lang.probabilities(&toks, None).unwrap());
        }
    }

    #[test]
    fn language_mode_ignores_image() {
        let config = ModelConfig::tiny(Mode::Language);
        let m = Model::new(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (toks, feat, _) = random_example(&mut rng, &config);
            let none = m.probabilities(&toks, None).unwrap();
            let some = m.probabilities(&toks, Some(&feat)).unwrap();
            assert_eq!(none, some);
        }
        let store = ImageFeatureStore::new();
        m.forward_with_store(&[1, 2], "missing", &store, Phase::Eval, &mut rng).unwrap();
        let full = Model::new(ModelConfig::tiny(Mode::Full)).unwrap();
        assert!(matches!(
            full.forward_with_store(&[1, 2], "missing", &store, Phase::Eval, &mut rng),
            Err(Error::UnknownImage(_))
        ));
    }

    #[test]
    fn predict_tie_break_and_shift_invariance() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
        let config = ModelConfig::tiny(Mode::Concat);
        let mut m = Model::new(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (toks, feat, _) = random_example(&mut rng, &config);
        let before = m.predict(&toks, Some(&feat)).unwrap();
        m.params.classifier.bias.data_mut().iter_mut().for_each(|b| *b += 17.5);
        assert_eq!(m.predict(&toks, Some(&feat)).unwrap(), before);
    }

    #[test]
    fn duplicated_sample_batch_equals_single() {
        let config = ModelConfig::tiny(Mode::Full);
        let m = Model::new(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (toks, feat, target) = random_example(&mut rng, &config);
        let ex = Example { tokens: &toks, image: Some(&feat), target };
        let (l1, g1) = m.loss_and_gradients(&[ex], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (l2, g2) = m.loss_and_gradients(&[ex, ex], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn invalid_target_and_empty_batch() {
        let config = ModelConfig::tiny(Mode::Language);
        let m = Model::new(config).unwrap();
        let toks = [1usize];
        let bad = Example { tokens: &toks, image: None, target: 3 };
        assert!(matches!(m.loss_and_gradients(&[bad], &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Argument(_))));
        assert!(m.loss_and_gradients(&[], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn gradient_is_independent_of_thread_count() {
        let config = ModelConfig { dropout: 0.2, ..ModelConfig::tiny(Mode::Full) };
        let m = Model::new(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data: Vec<_> = (0..13).map(|_| random_example(&mut rng, &config)).collect();
        let batch: Vec<Example> = data
            .iter()
            .map(|(t, f, y)| Example { tokens: t, image: Some(f), target: *y })
            .collect();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| m.loss_and_gradients(&batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap())
        };
        let (l1, g1) = run(1);
        let (l4, g4) = run(4);
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert!(g1.iter().zip(&g4).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let config = ModelConfig::tiny(Mode::Full);
        let m = Model::new(config.clone()).unwrap();
        let vocab: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let answers: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &vocab, &answers).unwrap();
        let (back, header) = read_checkpoint(&mut buf.as_slice(), Some(&config)).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.answers, answers);

        let other = ModelConfig { seed: 99, ..config.clone() };
        assert!(matches!(read_checkpoint(&mut buf.as_slice(), Some(&other)), Err(Error::Checkpoint(_))));

        let mut truncated = buf.clone();
        truncated.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut truncated.as_slice(), None).is_err());
    }

    #[test]
    fn locate_names_groups() {
        let m = Model::new(ModelConfig::tiny(Mode::Language)).unwrap();
        assert_eq!(m.params.locate(0).unwrap().0, "embedding");
        assert_eq!(m.params.locate(48).unwrap(), ("sentence.0.weights".to_string(), 0));
        let n = m.params.num_params();
        assert_eq!(m.params.locate(n - 1).unwrap(), ("classifier.bias".to_string(), 2));
        assert!(m.params.locate(n).is_none());
        assert_eq!(m.params.frozen_range(), 0..4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn flatten_unflatten_is_bit_exact(seed in any::<u64>(), mode in 0usize..3) {
            let mut m = Model::new(ModelConfig::tiny(Mode::ALL[mode])).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..m.params.num_params()).map(|_| f64::from_bits(rng.gen::<u64>() >> 2)).collect();
            m.params.unflatten(&v).unwrap();
            let back = m.params.flatten();
            prop_assert!(back.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
