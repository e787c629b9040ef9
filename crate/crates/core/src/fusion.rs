//! Multimodal convolution: the image vector is slotted between every pair of
//! consecutive question segments, a shared convolution unit is applied to each
//! `q_i ‖ im ‖ q_{i+1}` window, and the resulting positions are max-pooled
//! into the joint representation.
//!
//! [`fuse_concat_ablation`] is the parameter-free replacement used to measure
//! what the fusion layer contributes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{glorot_uniform, Activation};
use crate::sentence::QuestionRepresentation;
use crate::tensor::{gemv, gemv_t_acc, outer_acc, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalConvParams {
    /// `[feature_maps x 3 * dim]`: question block, image block, next-question block.
    pub weights: Tensor,
    pub biases: Tensor,
    pub activation: Activation,
}

impl MultimodalConvParams {
    pub fn new(weights: Tensor, biases: Tensor, activation: Activation) -> Result<Self> {
        if weights.rank() != 2 || weights.cols() % 3 != 0 {
            return Err(Error::dim("multimodal weights must have 3*d columns", weights.shape(), &[3]));
        }
        if biases.shape() != [weights.rows()] {
            return Err(Error::dim("multimodal biases vs weights", biases.shape(), weights.shape()));
        }
        Ok(MultimodalConvParams {
            weights,
            biases,
            activation,
        })
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, feature_maps: usize, activation: Activation, rng: &mut R) -> Self {
        MultimodalConvParams {
            weights: glorot_uniform(feature_maps, 3 * dim, rng),
            biases: Tensor::zeros(&[feature_maps]),
            activation,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.cols() / 3
    }

    pub fn feature_maps(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone)]
pub struct FusionTrace {
    /// Activated unit output per position, `[P-1 x F]`.
    positions: Tensor,
    /// Winning position per feature map.
    argmax: Vec<usize>,
    pub output: Tensor,
}

fn check_inputs(qt: &QuestionRepresentation, im: &Tensor, dim: usize, min_positions: usize) -> Result<()> {
    if qt.dim() != dim || im.rank() != 1 || im.len() != dim {
        return Err(Error::dim("question/image dims", qt.positions.shape(), im.shape()));
    }
    if qt.len() < min_positions {
        return Err(Error::arg(format!(
            "need at least {min_positions} question segments, got {}",
            qt.len()
        )));
    }
    Ok(())
}

fn window(qt: &QuestionRepresentation, im: &Tensor, i: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(3 * im.len());
    x.extend_from_slice(qt.segment(i));
    x.extend_from_slice(im.data());
    x.extend_from_slice(qt.segment(i + 1));
    x
}

pub fn fuse(qt: &QuestionRepresentation, im: &Tensor, params: &MultimodalConvParams) -> Result<Tensor> {
    fuse_traced(qt, im, params).map(|t| t.output)
}

pub fn fuse_traced(qt: &QuestionRepresentation, im: &Tensor, params: &MultimodalConvParams) -> Result<FusionTrace> {
    check_inputs(qt, im, params.dim(), 2)?;
    let f = params.feature_maps();
    let n = qt.len() - 1;
    let mut units = vec![0.0; n * f];
    for (i, row) in units.chunks_exact_mut(f).enumerate() {
        gemv(params.weights.data(), &window(qt, im, i), row);
        for (o, b) in row.iter_mut().zip(params.biases.data()) {
            *o = params.activation.apply(*o + b);
        }
    }
    let positions = Tensor::matrix(n, f, units)?;
    let (output, argmax) = max_over_positions(&positions);
    Ok(FusionTrace {
        positions,
        argmax,
        output,
    })
}

/// Per-column maximum of a `[P x F]` matrix; ties go to the earliest row.
fn max_over_positions(m: &Tensor) -> (Tensor, Vec<usize>) {
    let f = m.cols();
    let mut best = m.row(0).to_vec();
    let mut argmax = vec![0; f];
    for i in 1..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if *v > best[j] {
                best[j] = *v;
                argmax[j] = i;
            }
        }
    }
    (Tensor::vector(best), argmax)
}

#[derive(Debug, Clone)]
pub struct FusionGrad {
    pub weights: Tensor,
    pub biases: Tensor,
    pub question: Tensor,
    pub image: Tensor,
}

pub fn fuse_backward(
    trace: &FusionTrace,
    qt: &QuestionRepresentation,
    im: &Tensor,
    params: &MultimodalConvParams,
    upstream: &Tensor,
) -> Result<FusionGrad> {
    let f = params.feature_maps();
    let d = params.dim();
    if upstream.shape() != [f] {
        return Err(Error::dim("fusion upstream", upstream.shape(), &[f]));
    }
    let mut dw = Tensor::zeros(params.weights.shape());
    let mut db = Tensor::zeros(params.biases.shape());
    let mut dq = Tensor::zeros(qt.positions.shape());
    let mut dim = Tensor::zeros(im.shape());
    let mut dx = vec![0.0; 3 * d];
    for i in 0..trace.positions.rows() {
        let mut dz = vec![0.0; f];
        let mut any = false;
        for j in 0..f {
            if trace.argmax[j] == i {
                dz[j] = upstream.data()[j] * params.activation.derivative_from_output(trace.positions.row(i)[j]);
                any |= dz[j] != 0.0;
            }
        }
        if !any {
            continue;
        }
        outer_acc(&dz, &window(qt, im, i), dw.data_mut());
        for (b, g) in db.data_mut().iter_mut().zip(&dz) {
            *b += g;
        }
        dx.iter_mut().for_each(|v| *v = 0.0);
        gemv_t_acc(params.weights.data(), &dz, &mut dx);
        for (a, g) in dq.row_mut(i).iter_mut().zip(&dx[..d]) {
            *a += g;
        }
        for (a, g) in dim.data_mut().iter_mut().zip(&dx[d..2 * d]) {
            *a += g;
        }
        for (a, g) in dq.row_mut(i + 1).iter_mut().zip(&dx[2 * d..]) {
            *a += g;
        }
    }
    Ok(FusionGrad {
        weights: dw,
        biases: db,
        question: dq,
        image: dim,
    })
}

/// Max over question positions, one value per feature.
pub fn pool_question(qt: &QuestionRepresentation) -> (Tensor, Vec<usize>) {
    max_over_positions(&qt.positions)
}

/// Routes a gradient on the pooled question back to its winning positions.
pub fn pool_question_backward(argmax: &[usize], qt_shape: &[usize], upstream: &[f64]) -> Tensor {
    let mut dq = Tensor::zeros(qt_shape);
    let d = qt_shape[1];
    for (j, (&src, g)) in argmax.iter().zip(upstream).enumerate() {
        dq.data_mut()[src * d + j] += g;
    }
    dq
}

/// Ablation: pool the question over its positions and append the image.
/// A single segment is allowed here since no pairs are formed.
pub fn fuse_concat_ablation(qt: &QuestionRepresentation, im: &Tensor) -> Result<Tensor> {
    check_inputs(qt, im, qt.dim(), 1)?;
    let (pooled, _) = pool_question(qt);
    let mut out = pooled.into_data();
    out.extend_from_slice(im.data());
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qrep(rows: &[Vec<f64>]) -> QuestionRepresentation {
        QuestionRepresentation {
            positions: Tensor::from_rows(rows).unwrap(),
        }
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn hand_computed_small_case() {
        let p = MultimodalConvParams::new(
            Tensor::matrix(1, 6, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
            Tensor::vector(vec![0.0]),
            Activation::Relu,
        )
        .unwrap();
        let qt = qrep(&[vec![3.0, -1.0], vec![7.0, 7.0]]);
        let im = Tensor::vector(vec![2.0, 5.0]);
        assert_eq!(fuse(&qt, &im, &p).unwrap().data(), &[8.0]);
    }

    #[test]
    fn default_shape_and_constant_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MultimodalConvParams::init(400, 400, Activation::Relu, &mut rng);
        let qt = QuestionRepresentation {
            positions: Tensor::matrix(3, 400, random(&mut rng, 1200)).unwrap(),
        };
        let im = Tensor::vector(random(&mut rng, 400));
        let trace = fuse_traced(&qt, &im, &p).unwrap();
        assert_eq!(trace.positions.rows(), 2);
        assert_eq!(trace.output.len(), 400);

        let b = vec![-1.0, 0.5, 2.0];
        let constant = MultimodalConvParams::new(Tensor::zeros(&[3, 6]), Tensor::vector(b), Activation::Relu).unwrap();
        for _ in 0..3 {
            let qt = qrep(&[random(&mut rng, 2), random(&mut rng, 2), random(&mut rng, 2)]);
            let im = Tensor::vector(random(&mut rng, 2));
            assert_eq!(fuse(&qt, &im, &constant).unwrap().data(), &[0.0, 0.5, 2.0]);
        }
    }

    #[test]
    fn errors() {
        let p = MultimodalConvParams::new(Tensor::zeros(&[1, 6]), Tensor::zeros(&[1]), Activation::Relu).unwrap();
        let one = qrep(&[vec![1.0, 2.0]]);
        assert!(matches!(fuse(&one, &Tensor::vector(vec![0.0, 0.0]), &p), Err(Error::Argument(_))));
        let two = qrep(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(matches!(fuse(&two, &Tensor::vector(vec![0.0; 3]), &p), Err(Error::Dimension { .. })));
        assert!(fuse_concat_ablation(&two, &Tensor::vector(vec![0.0; 3])).is_err());
    }

    #[test]
    fn output_depends_on_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = MultimodalConvParams::new(
            Tensor::matrix(4, 9, random(&mut rng, 36)).unwrap(),
            Tensor::vector(vec![0.5; 4]),
            Activation::Relu,
        )
        .unwrap();
        let qt = qrep(&[random(&mut rng, 3), random(&mut rng, 3), random(&mut rng, 3)]);
        let a = fuse(&qt, &Tensor::vector(random(&mut rng, 3)), &p).unwrap();
        let b = fuse(&qt, &Tensor::vector(random(&mut rng, 3)), &p).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn pair_swap_symmetry_depends_on_weight_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 3;
        let im = Tensor::vector(random(&mut rng, d));
        let (s0, s1) = (random(&mut rng, d), random(&mut rng, d));
        let forward = qrep(&[s0.clone(), s1.clone()]);
        let swapped = qrep(&[s1, s0]);

        // equal first/last blocks: swapping the pair is invisible
        let mut sym = Vec::new();
        for _ in 0..2 {
            let q = random(&mut rng, d);
            let i = random(&mut rng, d);
            sym.extend(q.iter().chain(&i).chain(&q));
        }
        let p = MultimodalConvParams::new(Tensor::matrix(2, 3 * d, sym).unwrap(), Tensor::vector(vec![0.3, 0.3]), Activation::Relu).unwrap();
        let (a, b) = (fuse(&forward, &im, &p).unwrap(), fuse(&swapped, &im, &p).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));

        let p = MultimodalConvParams::new(
            Tensor::matrix(2, 3 * d, random(&mut rng, 6 * d)).unwrap(),
            Tensor::vector(vec![0.3, 0.3]),
            Activation::Relu,
        )
        .unwrap();
        assert_ne!(fuse(&forward, &im, &p).unwrap(), fuse(&swapped, &im, &p).unwrap());
    }

    #[test]
    fn concat_ablation_examples() {
        let out = fuse_concat_ablation(&qrep(&[vec![1.0, 5.0], vec![3.0, 2.0]]), &Tensor::vector(vec![9.0, 9.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 5.0, 9.0, 9.0]);
        let out = fuse_concat_ablation(&qrep(&[vec![4.0, 4.0]]), &Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 4.0, 1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..6 {
            let qt = qrep(&[random(&mut rng, d), random(&mut rng, d), random(&mut rng, d)]);
            assert_eq!(fuse_concat_ablation(&qt, &Tensor::vector(random(&mut rng, d))).unwrap().len(), 2 * d);
        }
    }

    #[test]
    fn fuse_gradients_match_finite_differences() {
        let (d, f, p) = (3, 4, 3);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(70 + seed);
            let w0 = random(&mut rng, f * 3 * d);
            let b0 = random(&mut rng, f);
            let q0 = random(&mut rng, p * d);
            let i0 = random(&mut rng, d);
            let probe = random(&mut rng, f);
            let build = |w: &[f64], b: &[f64]| {
                MultimodalConvParams::new(Tensor::matrix(f, 3 * d, w.to_vec()).unwrap(), Tensor::vector(b.to_vec()), Activation::Relu)
                    .unwrap()
            };
            let score = |w: &[f64], b: &[f64], q: &[f64], i: &[f64]| {
                let qt = QuestionRepresentation {
                    positions: Tensor::matrix(p, d, q.to_vec()).unwrap(),
                };
                fuse(&qt, &Tensor::vector(i.to_vec()), &build(w, b))
                    .unwrap()
                    .data()
                    .iter()
                    .zip(&probe)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let qt = QuestionRepresentation {
                positions: Tensor::matrix(p, d, q0.clone()).unwrap(),
            };
            let im = Tensor::vector(i0.clone());
            let params = build(&w0, &b0);
            let trace = fuse_traced(&qt, &im, &params).unwrap();
            let g = fuse_backward(&trace, &qt, &im, &params, &Tensor::vector(probe.clone())).unwrap();

            let checks = [
                (g.weights.data().to_vec(), finite_difference_gradient(|w| score(w, &b0, &q0, &i0), &w0, 1e-5).unwrap()),
                (g.biases.data().to_vec(), finite_difference_gradient(|b| score(&w0, b, &q0, &i0), &b0, 1e-5).unwrap()),
                (g.question.data().to_vec(), finite_difference_gradient(|q| score(&w0, &b0, q, &i0), &q0, 1e-5).unwrap()),
                (g.image.data().to_vec(), finite_difference_gradient(|i| score(&w0, &b0, &q0, i), &i0, 1e-5).unwrap()),
            ];
            for (analytic, numeric) in checks {
                for (a, n) in analytic.iter().zip(&numeric) {
                    assert!((a - n).abs() <= 1e-3 * a.abs().max(n.abs()).max(1e-6), "seed {seed}: {a} vs {n}");
                }
            }
        }
    }
}
