//! Reverse-mode gradients against central finite differences.

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use symn_core::data::{build_batch, tokenize_and_mask, VOCAB_SIZE};
use symn_core::model::{self, ModelConfig, ModelParams};
use symn_core::tensor::{softmax_rows, Tape, Tensor, Var};

const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks d(sum(w * op(inputs)))/d(inputs) element by element, where `w` is a
/// fixed random weighting that makes the scalar sensitive to every output.
fn check_op(inputs: Vec<Tensor>, op: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out_shape = {
        let mut t = Tape::new();
        let v: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let o = op(&mut t, &v);
        t.shape(o).to_vec()
    };
    let w = random(&out_shape, &mut rng);
    let build = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_requires_grad(true))).collect();
        let out = op(&mut tape, &vars);
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        (tape, vars, loss)
    };
    let value = |xs: &[Tensor]| {
        let (tape, _, loss) = build(xs);
        tape.value(loss).item()
    };
    let (mut tape, vars, loss) = build(&inputs);
    tape.backward(loss).unwrap();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).unwrap();
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fd = (value(&plus) - value(&minus)) / (2.0 * H);
            assert!(
                rel_err(fd, analytic[i]) < 1e-4 || (fd - analytic[i]).abs() < 1e-9,
                "input {k} element {i}: fd {fd} vs autodiff {}",
                analytic[i]
            );
        }
    }
}

#[test]
fn matmul_2d_and_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check_op(vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check_op(vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 2], &mut rng)], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
}

#[test]
fn add_mul_scale_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check_op(vec![random(&[2, 3, 4], &mut rng), random(&[4], &mut rng)], |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check_op(vec![random(&[2, 3], &mut rng), random(&[2, 3], &mut rng)], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    check_op(vec![random(&[3, 5], &mut rng), random(&[5], &mut rng)], |t, v| {
        let m = t.mul(v[0], v[1]).unwrap();
        t.scale(m, -1.75)
    });
}

#[test]
fn layer_norm_and_gelu() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check_op(
        vec![random(&[2, 3, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)],
        |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
    );
    check_op(vec![random(&[4, 5], &mut rng)], |t, v| t.gelu(v[0]));
}

#[test]
fn embedding_with_repeated_ids() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check_op(vec![random(&[5, 3], &mut rng)], |t, v| t.embedding(v[0], &[1, 4, 1, 0, 1, 2], &[2, 3]).unwrap());
}

#[test]
fn softmax_transpose_reshape_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check_op(vec![random(&[3, 5], &mut rng)], |t, v| t.softmax(v[0]));
    check_op(vec![random(&[2, 3, 4], &mut rng)], |t, v| t.transpose(v[0], &[1, 2, 0]).unwrap());
    check_op(vec![random(&[2, 6], &mut rng)], |t, v| t.reshape(v[0], &[3, 4]).unwrap());
    check_op(vec![random(&[1, 2, 3], &mut rng), random(&[2, 2, 3], &mut rng)], |t, v| {
        t.concat_batch(v[0], v[1]).unwrap()
    });
}

#[test]
fn masked_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels = [0, 3, 2, 1, 3, 0];
    let mask = [true, false, true, true, false, true];
    check_op(vec![random(&[2, 3, 4], &mut rng)], |t, v| {
        t.cross_entropy_masked(v[0], &labels, &mask).unwrap()
    });
}

fn toy_model() -> ModelParams {
    ModelParams::init(&ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        context_len: 16,
        seed: 7,
    })
    .unwrap()
}

#[test]
fn full_model_along_twenty_random_directions() {
    let mut params = toy_model();
    // larger weights than the init so every nonlinearity is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    let a = tokenize_and_mask("tell me", "a joke", 16).unwrap();
    let b = tokenize_and_mask("hi", "there", 16).unwrap();
    let batch = build_batch(&[&a, &b]).unwrap();
    let mask = batch.loss_mask();
    let loss_at = |p: &ModelParams| {
        let logits = model::logits(p, &batch.tokens, &batch.lengths).unwrap();
        let per = model::sequence_nll(&logits, &batch.labels, &mask);
        let (s, c) = per.iter().fold((0.0, 0), |(s, c), (x, n)| (s + x, c + n));
        s / c as f64
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let logits = model::forward(&mut tape, &params, &bound, &batch.tokens, &batch.lengths).unwrap();
    let loss = tape.cross_entropy_masked(logits, &batch.labels, &mask).unwrap();
    tape.backward(loss).unwrap();
    params.absorb_grads(&tape, &bound);

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let dir: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, t)| (0..t.numel()).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let analytic: f64 = params
            .iter()
            .zip(&dir)
            .map(|((_, t), d)| t.grad().unwrap().iter().zip(d).map(|(g, u)| g * u / norm).sum::<f64>())
            .sum();
        let shifted = |sign: f64| {
            let mut p = params.clone();
            for ((_, t), d) in p.iter_mut().zip(&dir) {
                t.data_mut().iter_mut().zip(d).for_each(|(v, u)| *v += sign * H * u / norm);
            }
            loss_at(&p)
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * H);
        worst = worst.max(rel_err(fd, analytic));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let x = Tensor::new(vec![1, n], row.clone()).unwrap();
        let shifted = Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap();
        let (a, b) = (softmax_rows(&x), softmax_rows(&shifted));
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn masked_positions_get_exactly_zero_gradient(
        logits in prop::collection::vec(-5.0f64..5.0, 12),
        mask in prop::collection::vec(any::<bool>(), 4),
        labels in prop::collection::vec(0usize..3, 4),
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4, 3], logits).unwrap().with_requires_grad(true));
        let loss = tape.cross_entropy_masked(x, &labels, &mask).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        for (pos, &m) in mask.iter().enumerate() {
            if !m {
                prop_assert!(g[pos * 3..pos * 3 + 3].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn identical_inputs_give_identical_outputs(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 5], &mut rng);
        let run = || {
            let mut t = Tape::new();
            let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
            let m = t.matmul(va, vb).unwrap();
            let s = t.softmax(m);
            t.value(s).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
