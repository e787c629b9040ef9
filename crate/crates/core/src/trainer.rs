//! Minibatch SGD, evaluation, and the gradient-check harness.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AnswerVocab, EncodedSample, Triplet, Vocab};
use crate::error::{Error, Result};
use crate::image::ImageFeatureStore;
use crate::metrics::{score_report, ScoreReport, TaxonomyTree};
use crate::model::{save_checkpoint, Example, Mode, Model, ModelConfig};
use crate::tensor::finite_difference_gradient_at;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Multiplicative learning-rate factor applied after each epoch.
    pub lr_decay: Option<f64>,
    /// Evaluate every this many epochs; 0 disables intermediate evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            learning_rate: 0.01,
            epochs: 50,
            seed: 0,
            checkpoint_every: None,
            lr_decay: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!("learning rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::arg(format!("lr decay must be positive, got {d}")));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::arg("checkpoint cadence must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.powi(epoch as i32),
            None => self.learning_rate,
        }
    }
}

/// `params -= lr * grad`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::dim("sgd step", &[params.len()], &[grad.len()]));
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

/// RNG for one epoch, derived only from the run seed and the epoch index.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Held-out data scored during training.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub triplets: &'a [Triplet],
    pub taxonomy: Option<&'a TaxonomyTree>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<ScoreReport>,
    pub wall_time_secs: f64,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub features: Option<&'a ImageFeatureStore>,
    pub vocab: &'a Vocab,
    pub answers: &'a AnswerVocab,
    pub eval: Option<EvalSet<'a>>,
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, vocab: &'a Vocab, answers: &'a AnswerVocab, features: Option<&'a ImageFeatureStore>) -> Self {
        Trainer {
            config,
            features,
            vocab,
            answers,
            eval: None,
            log: None,
            checkpoint: None,
        }
    }

    /// Trains `model` in place and returns the per-epoch log. Samples whose
    /// answer is outside the answer set are skipped.
    pub fn run(&mut self, model: &mut Model, triplets: &[Triplet]) -> Result<Vec<EpochRecord>> {
        self.config.validate()?;
        let encoded = crate::data::encode_triplets(triplets, self.vocab, self.answers);
        let samples: Vec<(&EncodedSample, usize)> = encoded.iter().filter_map(|s| s.target.map(|t| (s, t))).collect();
        if samples.len() < encoded.len() {
            log::warn!("skipping {} samples with answers outside the answer set", encoded.len() - samples.len());
        }
        if samples.is_empty() {
            return Err(Error::arg("no trainable samples"));
        }
        let images: Vec<Option<&[f64]>> = samples
            .iter()
            .map(|(s, _)| image_for(model.config.mode, self.features, &s.image_id))
            .collect::<Result<_>>()?;

        let start = Instant::now();
        let mut theta = model.params.flatten();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut records = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let lr = self.config.learning_rate_at(epoch);
            let mut rng = epoch_rng(self.config.seed, epoch);
            order.sort_unstable();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<Example<'_>> = chunk
                    .iter()
                    .map(|&i| Example {
                        tokens: &samples[i].0.tokens,
                        image: images[i],
                        target: samples[i].1,
                    })
                    .collect();
                let (loss, grad) = model.loss_and_gradients(&batch, &mut rng)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch: epoch + 1 });
                }
                total += loss * batch.len() as f64;
                sgd_step(&mut theta, &grad, lr)?;
                model.params.unflatten(&theta)?;
            }
            let epoch_no = epoch + 1;
            let eval = match self.eval {
                Some(set) if self.config.eval_every > 0 && (epoch_no % self.config.eval_every == 0 || epoch_no == self.config.epochs) => {
                    Some(evaluate(model, set.triplets, self.vocab, self.answers, self.features, set.taxonomy)?)
                }
                _ => None,
            };
            let record = EpochRecord {
                epoch: epoch_no,
                mean_loss: total / samples.len() as f64,
                learning_rate: lr,
                eval,
                wall_time_secs: start.elapsed().as_secs_f64(),
            };
            log::info!("epoch {epoch_no}: loss {:.6}", record.mean_loss);
            if let Some(w) = self.log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            records.push(record);
            if let (Some(path), Some(every)) = (&self.checkpoint, self.config.checkpoint_every) {
                if epoch_no % every == 0 {
                    save_checkpoint(path, model, self.vocab.tokens(), self.answers.answers())?;
                }
            }
        }
        if let Some(path) = &self.checkpoint {
            save_checkpoint(path, model, self.vocab.tokens(), self.answers.answers())?;
        }
        Ok(records)
    }
}

fn image_for<'s>(mode: Mode, store: Option<&'s ImageFeatureStore>, id: &str) -> Result<Option<&'s [f64]>> {
    if !mode.uses_image() {
        return Ok(None);
    }
    let store = store.ok_or_else(|| Error::arg("image features are required in this mode"))?;
    store.require(id).map(Some)
}

/// Predicted answer string for every triplet, evaluated in parallel.
pub fn predict_answers(
    model: &Model,
    triplets: &[Triplet],
    vocab: &Vocab,
    answers: &AnswerVocab,
    features: Option<&ImageFeatureStore>,
) -> Result<Vec<String>> {
    triplets
        .par_iter()
        .map(|t| {
            let image = image_for(model.config.mode, features, &t.image_id)?;
            let class = model.predict(&vocab.encode(&t.question), image)?;
            Ok(answers.answer(class).expect("class within answer set").to_string())
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    triplets: &[Triplet],
    vocab: &Vocab,
    answers: &AnswerVocab,
    features: Option<&ImageFeatureStore>,
    taxonomy: Option<&TaxonomyTree>,
) -> Result<ScoreReport> {
    let predictions = predict_answers(model, triplets, vocab, answers, features)?;
    let truths: Vec<&str> = triplets.iter().map(|t| t.answer.as_str()).collect();
    score_report(&predictions, &truths, taxonomy)
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub mode: Mode,
    pub seed: u64,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_group: String,
    pub worst_offset: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the analytic batch gradient with central differences on every
/// trainable coordinate. Parameters are redrawn uniformly in [-0.5, 0.5] so
/// biases are nonzero; the padding row stays zero and is skipped.
pub fn gradient_check(config: &ModelConfig, seed: u64, corrupt_backward: bool) -> Result<GradCheckReport> {
    if config.dropout != 0.0 {
        return Err(Error::arg("gradient check needs dropout 0"));
    }
    let mut model = Model::new(ModelConfig { seed, ..config.clone() })?;
    model.corrupt_backward = corrupt_backward;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let frozen = model.params.frozen_range();
    let theta: Vec<f64> = (0..model.params.num_params())
        .map(|i| if frozen.contains(&i) { 0.0 } else { rng.gen_range(-0.5..0.5) })
        .collect();
    model.params.unflatten(&theta)?;

    let samples: Vec<(Vec<usize>, Vec<f64>, usize)> = (0..2)
        .map(|_| {
            let len = rng.gen_range(1..=config.sentence.max_len);
            let tokens = (0..len).map(|_| rng.gen_range(1..config.vocab_size)).collect();
            let image = (0..config.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (tokens, image, rng.gen_range(0..config.answer_count))
        })
        .collect();
    let uses_image = config.mode.uses_image();
    let batch: Vec<Example<'_>> = samples
        .iter()
        .map(|(tokens, image, target)| Example {
            tokens,
            image: uses_image.then_some(image.as_slice()),
            target: *target,
        })
        .collect();

    let (_, analytic) = model.loss_and_gradients(&batch, &mut rng)?;
    let coords: Vec<usize> = (0..theta.len()).filter(|i| !frozen.contains(i)).collect();
    let mut probe = model.clone();
    let mut loss = |x: &[f64]| -> f64 {
        // shapes were validated by the analytic pass
        probe.params.unflatten(x).and_then(|_| probe.mean_loss(&batch)).unwrap_or(f64::NAN)
    };
    let numeric = finite_difference_gradient_at(&mut loss, &theta, GRADCHECK_STEP, coords.iter().copied())?;

    let mut worst = (0.0, coords[0], analytic[coords[0]], numeric[0]);
    for (k, &i) in coords.iter().enumerate() {
        let e = relative_error(analytic[i], numeric[k]);
        if e > worst.0 || e.is_nan() {
            worst = (e, i, analytic[i], numeric[k]);
        }
    }
    let (group, offset) = model.params.locate(worst.1).expect("index in range");
    Ok(GradCheckReport {
        mode: config.mode,
        seed,
        checked: coords.len(),
        max_relative_error: worst.0,
        worst_group: group,
        worst_offset: offset,
        analytic: worst.2,
        numeric: worst.3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabs, generate_synthetic, SynthConfig};
    use crate::layers::Activation;
    use crate::sentence::SentenceEncoderConfig;

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0, -2.0];
        sgd_step(&mut p, &[0.0, 0.0], 0.3).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        let mut p = vec![1.0];
        sgd_step(&mut p, &[2.0], 0.5).unwrap();
        assert_eq!(p, vec![0.0]);
        assert!(sgd_step(&mut p, &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn sgd_steps_on_quadratic_compose_only_at_frozen_point() {
        // L(x) = 0.5 * x^T A x, gradient A x.
        let a = [[2.0, 0.5], [0.5, 1.0]];
        let grad = |x: &[f64]| vec![a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]];
        let x0 = vec![1.0, -1.0];
        let lr = 0.1;
        let g = grad(&x0);
        let mut frozen = x0.clone();
        sgd_step(&mut frozen, &g, lr).unwrap();
        sgd_step(&mut frozen, &g, lr).unwrap();
        let summed: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let mut once = x0.clone();
        sgd_step(&mut once, &summed, lr).unwrap();
        for (u, v) in frozen.iter().zip(&once) {
            assert!((u - v).abs() < 1e-15);
        }
        let mut moving = x0.clone();
        sgd_step(&mut moving, &grad(&x0), lr).unwrap();
        let g2 = grad(&moving);
        sgd_step(&mut moving, &g2, lr).unwrap();
        assert!(moving.iter().zip(&once).any(|(u, v)| (u - v).abs() > 1e-6));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_decay: Some(0.0), ..Default::default() }.validate().is_err());
        let c = TrainConfig { lr_decay: Some(0.5), ..Default::default() };
        assert_eq!(c.learning_rate_at(2), 0.0025);
    }

    #[test]
    fn epoch_streams_differ_and_repeat() {
        let a: u64 = epoch_rng(1, 0).gen();
        let b: u64 = epoch_rng(1, 1).gen();
        assert_ne!(a, b);
        assert_eq!(a, epoch_rng(1, 0).gen::<u64>());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 1e-3);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    fn small_setup(mode: Mode) -> (Vec<Triplet>, ImageFeatureStore, Vocab, AnswerVocab, ModelConfig) {
        let synth = SynthConfig {
            samples: 60,
            feature_dim: 40,
            ..SynthConfig::default()
        };
        let data = generate_synthetic(&synth).unwrap();
        let (vocab, answers) = build_vocabs(&data.triplets);
        let config = ModelConfig {
            sentence: SentenceEncoderConfig {
                max_len: 24,
                embed_dim: 6,
                feature_maps: [8, 8, 8],
                receptive_field: 3,
                activation: Activation::Relu,
            },
            vocab_size: vocab.len(),
            joint_dim: 8,
            multimodal_maps: 8,
            feature_dim: 40,
            answer_count: answers.len(),
            dropout: 0.1,
            embedding_init: 0.1,
            mode,
            activation: Activation::Relu,
            seed: 5,
        };
        (data.triplets, data.features, vocab, answers, config)
    }

    #[test]
    fn zero_learning_rate_keeps_initial_params() {
        let (train, store, vocab, answers, config) = small_setup(Mode::Full);
        let mut model = Model::new(config).unwrap();
        let init = model.params.clone();
        let tc = TrainConfig { learning_rate: 0.0, epochs: 1, batch_size: 16, ..Default::default() };
        Trainer::new(tc, &vocab, &answers, Some(&store)).run(&mut model, &train).unwrap();
        assert_eq!(model.params, init);
    }

    #[test]
    fn same_seeds_give_identical_logs() {
        let (train, store, vocab, answers, config) = small_setup(Mode::Concat);
        let run = || {
            let mut model = Model::new(config.clone()).unwrap();
            let mut buf = Vec::new();
            let tc = TrainConfig { epochs: 3, batch_size: 7, learning_rate: 0.05, seed: 9, ..Default::default() };
            let mut trainer = Trainer::new(tc, &vocab, &answers, Some(&store));
            trainer.eval = Some(EvalSet { triplets: &train[..20], taxonomy: None });
            trainer.log = Some(&mut buf);
            let recs = trainer.run(&mut model, &train).unwrap();
            (recs, model.params, String::from_utf8(buf).unwrap())
        };
        let (r1, p1, log1) = run();
        let (r2, p2, _) = run();
        assert_eq!(p1, p2);
        let strip = |r: &[EpochRecord]| r.iter().map(|e| (e.mean_loss, e.eval.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&r1), strip(&r2));
        assert_eq!(log1.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(log1.lines().next().unwrap()).unwrap();
        assert_eq!(first["epoch"], 1);
        assert!(first["eval"]["accuracy"].is_number());
    }

    #[test]
    fn language_mode_trains_without_features() {
        let (train, _, vocab, answers, config) = small_setup(Mode::Language);
        let mut model = Model::new(config).unwrap();
        let tc = TrainConfig { epochs: 1, batch_size: 10, ..Default::default() };
        assert!(Trainer::new(tc, &vocab, &answers, None).run(&mut model, &train).is_ok());
    }

    #[test]
    fn image_modes_require_features() {
        let (train, _, vocab, answers, config) = small_setup(Mode::Full);
        let mut model = Model::new(config).unwrap();
        let tc = TrainConfig { epochs: 1, ..Default::default() };
        assert!(Trainer::new(tc, &vocab, &answers, None).run(&mut model, &train).is_err());
    }

    #[test]
    fn gradient_check_passes_in_every_mode() {
        for mode in Mode::ALL {
            let report = gradient_check(&ModelConfig::tiny(mode), 1, false).unwrap();
            assert!(report.passed(), "{report:?}");
            assert!(report.checked > 0);
        }
    }

    #[test]
    fn gradient_check_catches_corrupted_backward() {
        let report = gradient_check(&ModelConfig::tiny(Mode::Full), 1, true).unwrap();
        assert!(!report.passed());
        assert!(report.worst_group.starts_with("classifier") || report.max_relative_error > 0.1);
    }

    #[test]
    fn gradient_check_rejects_dropout() {
        let config = ModelConfig { dropout: 0.1, ..ModelConfig::tiny(Mode::Full) };
        assert!(gradient_check(&config, 0, false).is_err());
    }
}
